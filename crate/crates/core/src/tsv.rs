//! Helpers for the tab-separated artifact files.
//!
//! Fields may carry `\\`, `\t`, `\n` and `\r` as backslash escapes; every
//! writer in this crate escapes with [`escape`] and every reader splits with
//! [`split_fields`].

use std::borrow::Cow;

pub fn escape(field: &str) -> Cow<'_, str> {
    if !field.contains(['\\', '\t', '\n', '\r']) {
        return Cow::Borrowed(field);
    }
    let mut out = String::with_capacity(field.len() + 4);
    for ch in field.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    Cow::Owned(out)
}

pub fn unescape(field: &str) -> String {
    if !field.contains('\\') {
        return field.to_string();
    }
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Splits one line into unescaped fields. A trailing `\r` is dropped.
pub fn split_fields(line: &str) -> Vec<String> {
    line.trim_end_matches('\r').split('\t').map(unescape).collect()
}

/// Lines that carry data: non-empty and not starting with `#`.
pub fn is_data_line(line: &str) -> bool {
    !line.trim().is_empty() && !line.starts_with('#')
}
