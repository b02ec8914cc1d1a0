//! Utterance normalization shared by mining and serving.
//!
//! Lookups only hit when the request text is normalized exactly the way
//! mined keys were, so both sides must call [`normalize`].

/// Lowercases and collapses every run of whitespace into a single space,
/// trimming both ends.
pub fn normalize(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}
