//! Interpretation space: structured NLU keys and the utterance/interpretation
//! co-occurrence counts behind `P(h|u)` and `P(u|h)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AbsorbingLabel, Session};
use crate::tsv;

pub const UNPARSED: &str = "__unparsed__";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("interpretation key is empty")]
    Empty,
    #[error("interpretation key `{0}` has no intent segment")]
    MissingIntent(String),
    #[error("slot `{0}` is not of the form name:value")]
    BadSlot(String),
    #[error("interpretation key contains a control character")]
    ControlChar,
}

/// A point in interpretation space: `domain|intent|slot:value|...`.
///
/// Slots are kept sorted by name, so two keys are equal exactly when their
/// canonical serializations are equal. Ordering follows the serialization.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InterpretationKey {
    domain: String,
    intent: String,
    slots: Vec<(String, String)>,
    canonical: String,
}

impl InterpretationKey {
    pub fn new(
        domain: impl Into<String>,
        intent: impl Into<String>,
        slots: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, KeyError> {
        let domain = domain.into();
        let intent = intent.into();
        if domain.is_empty() {
            return Err(KeyError::Empty);
        }
        if intent.is_empty() {
            return Err(KeyError::MissingIntent(domain));
        }
        let mut slots: Vec<(String, String)> = slots.into_iter().collect();
        slots.sort();
        let key = Self::assemble(domain, intent, slots);
        if key.canonical.chars().any(char::is_control) {
            return Err(KeyError::ControlChar);
        }
        Ok(key)
    }

    /// The reserved key for events that arrived without an interpretation.
    pub fn unparsed() -> Self {
        Self {
            domain: UNPARSED.to_string(),
            intent: String::new(),
            slots: Vec::new(),
            canonical: UNPARSED.to_string(),
        }
    }

    fn assemble(domain: String, intent: String, slots: Vec<(String, String)>) -> Self {
        let mut canonical = format!("{domain}|{intent}");
        for (name, value) in &slots {
            canonical.push('|');
            canonical.push_str(name);
            canonical.push(':');
            canonical.push_str(value);
        }
        Self {
            domain,
            intent,
            slots,
            canonical,
        }
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn intent(&self) -> &str {
        &self.intent
    }

    pub fn slots(&self) -> &[(String, String)] {
        &self.slots
    }

    pub fn as_str(&self) -> &str {
        &self.canonical
    }

    pub fn is_unparsed(&self) -> bool {
        self.canonical == UNPARSED
    }
}

impl FromStr for InterpretationKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(KeyError::Empty);
        }
        if s == UNPARSED {
            return Ok(Self::unparsed());
        }
        let mut parts = s.split('|');
        let domain = parts.next().unwrap_or_default().trim();
        let intent = parts
            .next()
            .ok_or_else(|| KeyError::MissingIntent(s.to_string()))?
            .trim();
        let slots = parts
            .map(|slot| {
                slot.split_once(':')
                    .filter(|(name, _)| !name.trim().is_empty())
                    .map(|(name, value)| (name.trim().to_string(), value.trim().to_string()))
                    .ok_or_else(|| KeyError::BadSlot(slot.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(domain, intent, slots)
    }
}

impl TryFrom<String> for InterpretationKey {
    type Error = KeyError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<InterpretationKey> for String {
    fn from(key: InterpretationKey) -> Self {
        key.canonical
    }
}

impl PartialEq for InterpretationKey {
    fn eq(&self, other: &Self) -> bool {
        self.canonical == other.canonical
    }
}

impl Eq for InterpretationKey {}

impl std::hash::Hash for InterpretationKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.canonical.hash(state);
    }
}

impl PartialOrd for InterpretationKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for InterpretationKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.canonical.cmp(&other.canonical)
    }
}

impl fmt::Display for InterpretationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

impl fmt::Debug for InterpretationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InterpretationKey({})", self.canonical)
    }
}

/// A session projected into interpretation space, terminated by its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSession {
    pub states: Vec<InterpretationKey>,
    pub label: AbsorbingLabel,
}

/// Sparse `c(u, h)` counts, indexed in both directions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BipartiteCounts {
    by_utterance: BTreeMap<String, BTreeMap<InterpretationKey, u64>>,
    by_interpretation: BTreeMap<InterpretationKey, BTreeMap<String, u64>>,
}

#[derive(Debug, Error)]
pub enum CountsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

impl BipartiteCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, utterance: &str, key: &InterpretationKey, count: u64) {
        if count == 0 {
            return;
        }
        *self
            .by_utterance
            .entry(utterance.to_string())
            .or_default()
            .entry(key.clone())
            .or_default() += count;
        *self
            .by_interpretation
            .entry(key.clone())
            .or_default()
            .entry(utterance.to_string())
            .or_default() += count;
    }

    /// Commutative merge; shards can be counted independently.
    pub fn merge(&mut self, other: &BipartiteCounts) {
        for (u, row) in &other.by_utterance {
            for (h, c) in row {
                self.add(u, h, *c);
            }
        }
    }

    pub fn count(&self, utterance: &str, key: &InterpretationKey) -> u64 {
        self.by_utterance
            .get(utterance)
            .and_then(|row| row.get(key))
            .copied()
            .unwrap_or(0)
    }

    pub fn utterance_total(&self, utterance: &str) -> u64 {
        self.by_utterance
            .get(utterance)
            .map(|row| row.values().sum())
            .unwrap_or(0)
    }

    pub fn interpretation_total(&self, key: &InterpretationKey) -> u64 {
        self.by_interpretation
            .get(key)
            .map(|row| row.values().sum())
            .unwrap_or(0)
    }

    pub fn utterances(&self) -> impl Iterator<Item = &str> {
        self.by_utterance.keys().map(String::as_str)
    }

    pub fn interpretations(&self) -> impl Iterator<Item = &InterpretationKey> {
        self.by_interpretation.keys()
    }

    pub fn interpretations_of(&self, utterance: &str) -> Option<&BTreeMap<InterpretationKey, u64>> {
        self.by_utterance.get(utterance)
    }

    pub fn utterances_of(&self, key: &InterpretationKey) -> Option<&BTreeMap<String, u64>> {
        self.by_interpretation.get(key)
    }

    /// Iterates `(u, h, c(u,h))` sorted by utterance then key.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &InterpretationKey, u64)> {
        self.by_utterance
            .iter()
            .flat_map(|(u, row)| row.iter().map(move |(h, c)| (u.as_str(), h, *c)))
    }

    pub fn is_empty(&self) -> bool {
        self.by_utterance.is_empty()
    }

    /// Drops pairs seen fewer than `min_pair_count` times.
    pub fn filtered(&self, min_pair_count: u64) -> BipartiteCounts {
        let mut out = BipartiteCounts::new();
        for (u, h, c) in self.pairs() {
            if c >= min_pair_count {
                out.add(u, h, c);
            }
        }
        out
    }

    /// `P(h|u)`; empty when `u` is unknown.
    pub fn p_h_given_u(&self, utterance: &str) -> BTreeMap<InterpretationKey, f64> {
        match self.by_utterance.get(utterance) {
            Some(row) => normalize_row(row),
            None => BTreeMap::new(),
        }
    }

    /// `P(u|h)`; empty when `h` is unknown.
    pub fn p_u_given_h(&self, key: &InterpretationKey) -> BTreeMap<String, f64> {
        match self.by_interpretation.get(key) {
            Some(row) => normalize_row(row),
            None => BTreeMap::new(),
        }
    }

    /// Writes `utterance \t interpretation_key \t count`, sorted.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# utterance\tinterpretation_key\tcount")?;
        for (u, h, c) in self.pairs() {
            writeln!(out, "{}\t{}\t{}", tsv::escape(u), tsv::escape(h.as_str()), c)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self, CountsError> {
        let mut counts = BipartiteCounts::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if !tsv::is_data_line(&line) {
                continue;
            }
            let malformed = |reason: String| CountsError::Malformed {
                line: idx + 1,
                reason,
            };
            let fields = tsv::split_fields(&line);
            if fields.len() < 3 {
                return Err(malformed(format!("expected 3 fields, got {}", fields.len())));
            }
            let key: InterpretationKey = fields[1].parse().map_err(|e: KeyError| malformed(e.to_string()))?;
            let count: u64 = fields[2]
                .parse()
                .map_err(|_| malformed(format!("bad count `{}`", fields[2])))?;
            counts.add(&fields[0], &key, count);
        }
        Ok(counts)
    }
}

fn normalize_row<K: Ord + Clone>(row: &BTreeMap<K, u64>) -> BTreeMap<K, f64> {
    let total: u64 = row.values().sum();
    if total == 0 {
        return BTreeMap::new();
    }
    row.iter()
        .filter(|(_, c)| **c > 0)
        .map(|(k, c)| (k.clone(), *c as f64 / total as f64))
        .collect()
}

/// Output of [`project`].
#[derive(Debug, Clone, Default)]
pub struct Projection {
    pub sessions: Vec<LatentSession>,
    pub counts: BipartiteCounts,
    /// Events that carried no interpretation and were mapped to `__unparsed__`.
    pub unparsed_events: u64,
}

/// Projects finalized sessions into interpretation space and counts every
/// `(u, h)` occurrence, at any position in the session.
pub fn project(sessions: &[Session]) -> Projection {
    let mut projection = Projection::default();
    for session in sessions {
        let mut states = Vec::with_capacity(session.events.len());
        for event in &session.events {
            let key = match &event.interpretation {
                Some(key) => key.clone(),
                None => {
                    projection.unparsed_events += 1;
                    InterpretationKey::unparsed()
                }
            };
            projection.counts.add(&event.utterance, &key, 1);
            states.push(key);
        }
        projection.sessions.push(LatentSession {
            states,
            label: session.label,
        });
    }
    projection
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> InterpretationKey {
        s.parse().unwrap()
    }

    #[test]
    fn canonical_form_sorts_slots() {
        let a = key("Music|PlayMusicIntent|SongName:shallow|ArtistName:lady gaga");
        assert_eq!(
            a.as_str(),
            "Music|PlayMusicIntent|ArtistName:lady gaga|SongName:shallow"
        );
        let b = InterpretationKey::new(
            "Music",
            "PlayMusicIntent",
            [
                ("ArtistName".to_string(), "lady gaga".to_string()),
                ("SongName".to_string(), "shallow".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(key(a.as_str()), a);
    }

    #[test]
    fn slot_value_kept_verbatim() {
        let h = key("Music|PlayMusicIntent|AlbumName:despicable me");
        assert_eq!(h.slots(), &[("AlbumName".into(), "despicable me".into())]);
    }

    #[test]
    fn rejects_malformed_keys() {
        assert_eq!("".parse::<InterpretationKey>(), Err(KeyError::Empty));
        assert!(matches!("Music".parse::<InterpretationKey>(), Err(KeyError::MissingIntent(_))));
        assert!(matches!("Music|Play|oops".parse::<InterpretationKey>(), Err(KeyError::BadSlot(_))));
        assert!(key(UNPARSED).is_unparsed());
    }

    #[test]
    fn p_h_given_u_arithmetic() {
        let mut c = BipartiteCounts::new();
        c.add("u", &key("D|h1"), 3);
        c.add("u", &key("D|h2"), 1);
        let p = c.p_h_given_u("u");
        assert_eq!(p[&key("D|h1")], 0.75);
        assert_eq!(p[&key("D|h2")], 0.25);
        assert!(c.p_h_given_u("absent").is_empty());
    }

    #[test]
    fn degenerate_distribution() {
        for k in [1u64, 7, 1000] {
            let mut c = BipartiteCounts::new();
            c.add("u", &key("D|h"), k);
            assert_eq!(c.p_h_given_u("u")[&key("D|h")], 1.0);
        }
    }

    #[test]
    fn p_u_given_h_arithmetic() {
        let h = key("D|h");
        let mut c = BipartiteCounts::new();
        c.add("u1", &h, 1);
        c.add("u2", &h, 1);
        let p = c.p_u_given_h(&h);
        assert_eq!(p["u1"], 0.5);
        assert_eq!(p["u2"], 0.5);

        let mut c = BipartiteCounts::new();
        c.add("u1", &h, 9);
        c.add("u2", &h, 1);
        let p = c.p_u_given_h(&h);
        assert!((p["u1"] - 0.9).abs() < 1e-15);
        assert!((p["u2"] - 0.1).abs() < 1e-15);
        assert!(c.p_u_given_h(&key("D|absent")).is_empty());
    }

    #[test]
    fn filtered_drops_rare_pairs() {
        let mut c = BipartiteCounts::new();
        c.add("u", &key("D|a"), 5);
        c.add("u", &key("D|b"), 1);
        let f = c.filtered(2);
        assert_eq!(f.count("u", &key("D|a")), 5);
        assert_eq!(f.count("u", &key("D|b")), 0);
        assert_eq!(f.utterance_total("u"), 5);
    }

    #[test]
    fn tsv_round_trip() {
        let mut c = BipartiteCounts::new();
        c.add("play abc", &key("Music|Play|SongName:abc"), 2);
        c.add("play abc", &key("Music|Play|AlbumName:abc"), 1);
        c.add("stop", &key("Global|StopIntent"), 4);
        let mut buf = Vec::new();
        c.write_tsv(&mut buf).unwrap();
        let back = BipartiteCounts::read_tsv(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        let mut again = Vec::new();
        back.write_tsv(&mut again).unwrap();
        assert_eq!(buf, again);
    }
}
