//! From interpretation-level success vectors to an utterance rewrite table.
//!
//! A source utterance `u_s` is scored against every candidate `u_t` as
//!
//! ```text
//! score(u_t) = sum over h_s, h_t of P(u_t|h_t) * phi(h_t | h_s) * P(h_s|u_s)
//! ```
//!
//! and the best `u_t` becomes a candidate when it beats the score of keeping
//! `u_s` itself. Candidates then pass a one-sided two-proportion Z-test on
//! friction rates before they are published.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::ingest::{AbsorbingLabel, Session};
use crate::interpretation::{BipartiteCounts, InterpretationKey};
use crate::solver::{best_target, SuccessVector};
use crate::tsv;

pub const DEFAULT_P_THRESHOLD: f64 = 0.01;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteCandidate {
    pub source_utterance: String,
    pub target_utterance: String,
    pub score: f64,
    /// Occurrences of the source utterance in the mined corpus.
    pub support: u64,
    pub mined_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_id: String,
    pub mined_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewriteTable {
    entries: BTreeMap<String, RewriteCandidate>,
    pub provenance: Provenance,
}

/// Success vectors indexed by source interpretation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuccessTable {
    vectors: BTreeMap<InterpretationKey, SuccessVector>,
}

impl SuccessTable {
    pub fn new(vectors: impl IntoIterator<Item = SuccessVector>) -> Self {
        Self {
            vectors: vectors.into_iter().map(|v| (v.source.clone(), v)).collect(),
        }
    }

    pub fn get(&self, source: &InterpretationKey) -> Option<&SuccessVector> {
        self.vectors.get(source)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SuccessVector> {
        self.vectors.values()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftConfig {
    /// Interpretations per source utterance that enter the outer sum.
    pub top_k: usize,
    pub min_support: u64,
    pub mined_at: u64,
    /// Targets never proposed, e.g. generic requests like "shuffle my songs".
    pub target_stoplist: BTreeSet<String>,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            min_support: 1,
            mined_at: 0,
            target_stoplist: BTreeSet::new(),
        }
    }
}

fn top_k<K: Ord + Clone>(dist: BTreeMap<K, f64>, k: usize) -> Vec<(K, f64)> {
    let mut items: Vec<(K, f64)> = dist.into_iter().collect();
    // BTreeMap order is the tie-break, and sort_by is stable
    items.sort_by(|a, b| b.1.total_cmp(&a.1));
    items.truncate(k);
    items
}

/// Scores every reachable utterance for `u_s`. Returns an empty map when no
/// interpretation of `u_s` has a vector.
pub fn utterance_scores(
    source: &str,
    vectors: &SuccessTable,
    counts: &BipartiteCounts,
    top_k_interpretations: usize,
) -> BTreeMap<String, f64> {
    let mut cache: HashMap<&InterpretationKey, BTreeMap<String, f64>> = HashMap::new();
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for (h_s, p_hs) in top_k(counts.p_h_given_u(source), top_k_interpretations) {
        let Some(vector) = vectors.get(&h_s) else { continue };
        for (h_t, phi) in &vector.entries {
            let p_u = cache.entry(h_t).or_insert_with(|| counts.p_u_given_h(h_t));
            for (u_t, p_ut) in p_u.iter() {
                *scores.entry(u_t.clone()).or_insert(0.0) += p_ut * phi * p_hs;
            }
        }
    }
    scores
}

/// Lifts interpretation-level rewrites to utterances.
///
/// A source is skipped unless at least one of its top-k interpretations has
/// a rewrite of its own. The winning target must differ from the source and
/// strictly beat the score of keeping the source.
pub fn lift_to_utterances(
    vectors: &SuccessTable,
    counts: &BipartiteCounts,
    config: &LiftConfig,
) -> Vec<RewriteCandidate> {
    let mut out = Vec::new();
    for source in counts.utterances() {
        let support = counts.utterance_total(source);
        if support < config.min_support {
            continue;
        }
        let interpretations = top_k(counts.p_h_given_u(source), config.top_k);
        let any_rewrite = interpretations.iter().any(|(h, _)| {
            vectors
                .get(h)
                .is_some_and(|v| best_target(v).is_rewrite())
        });
        if !any_rewrite {
            continue;
        }
        let scores = utterance_scores(source, vectors, counts, config.top_k);
        let keep = scores.get(source).copied().unwrap_or(0.0);
        let mut best: Option<(&String, f64)> = None;
        for (target, score) in &scores {
            if target == source || config.target_stoplist.contains(target) {
                continue;
            }
            if best.is_none_or(|(_, b)| *score > b) {
                best = Some((target, *score));
            }
        }
        if let Some((target, score)) = best {
            if score > keep && score > 0.0 {
                out.push(RewriteCandidate {
                    source_utterance: source.to_string(),
                    target_utterance: target.clone(),
                    score: score.min(1.0),
                    support,
                    mined_at: config.mined_at,
                });
            }
        }
    }
    out
}

/// Per-utterance `(defective_sessions, total_sessions)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrictionStats {
    arms: BTreeMap<String, (u64, u64)>,
}

impl FrictionStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, utterance: impl Into<String>, defective: u64, total: u64) {
        assert!(defective <= total, "defective sessions exceed total");
        self.arms.insert(utterance.into(), (defective, total));
    }

    pub fn get(&self, utterance: &str) -> (u64, u64) {
        self.arms.get(utterance).copied().unwrap_or((0, 0))
    }

    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    /// Counts, per utterance, the sessions it occurs in and how many of them
    /// saw friction on one of its turns. A turn is frictionless only when it
    /// closes a successful session; any other turn was either followed by
    /// another attempt or ended in failure.
    pub fn from_sessions(sessions: &[Session]) -> Self {
        let mut arms: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for session in sessions {
            let last = session.events.len() - 1;
            let mut seen: BTreeMap<&str, bool> = BTreeMap::new();
            for (i, event) in session.events.iter().enumerate() {
                let friction = !(i == last && session.label == AbsorbingLabel::Success);
                *seen.entry(event.utterance.as_str()).or_insert(false) |= friction;
            }
            for (utterance, friction) in seen {
                let arm = arms.entry(utterance.to_string()).or_insert((0, 0));
                arm.1 += 1;
                if friction {
                    arm.0 += 1;
                }
            }
        }
        Self { arms }
    }

    /// Writes `utterance \t defective \t total`, sorted.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# utterance\tdefective_sessions\ttotal_sessions")?;
        for (u, (d, t)) in &self.arms {
            writeln!(out, "{}\t{d}\t{t}", tsv::escape(u))?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self, TableError> {
        let mut stats = Self::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if !tsv::is_data_line(&line) {
                continue;
            }
            let malformed = |reason: String| TableError::Malformed {
                line: idx + 1,
                reason,
            };
            let fields = tsv::split_fields(&line);
            if fields.len() < 3 {
                return Err(malformed(format!("expected 3 fields, got {}", fields.len())));
            }
            let d: u64 = fields[1].parse().map_err(|_| malformed("bad defective count".into()))?;
            let t: u64 = fields[2].parse().map_err(|_| malformed("bad total count".into()))?;
            if d > t {
                return Err(malformed("defective exceeds total".into()));
            }
            stats.arms.insert(fields[0].clone(), (d, t));
        }
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZTest {
    pub z: f64,
    /// One-sided: probability of a difference at least this large in favour
    /// of the first arm being worse.
    pub p_value: f64,
}

/// Pooled two-proportion Z-test of `H1: x1/n1 > x2/n2`.
///
/// Returns `None` when either arm is empty. Arms with identical degenerate
/// rates (both 0 or both 1) give `z = 0`.
pub fn two_proportion_z_test(x1: u64, n1: u64, x2: u64, n2: u64) -> Option<ZTest> {
    if n1 == 0 || n2 == 0 {
        return None;
    }
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let p1 = x1 as f64 / n1f;
    let p2 = x2 as f64 / n2f;
    let pooled = (x1 + x2) as f64 / (n1f + n2f);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    let z = if se > 0.0 { (p1 - p2) / se } else { 0.0 };
    let normal = Normal::standard();
    Some(ZTest {
        z,
        p_value: normal.sf(z),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlacklistDecision {
    pub source_utterance: String,
    pub target_utterance: String,
    pub test: Option<ZTest>,
    pub rejected: bool,
    pub insufficient_data: bool,
}

/// Rejects candidates whose rewrite arm has a significantly higher friction
/// rate than the original utterance (`p < p_threshold`). Candidates lacking
/// data on either arm pass with `insufficient_data` set.
pub fn blacklist_filter(
    candidates: Vec<RewriteCandidate>,
    stats: &FrictionStats,
    p_threshold: f64,
) -> (Vec<RewriteCandidate>, Vec<BlacklistDecision>) {
    let mut kept = Vec::with_capacity(candidates.len());
    let mut report = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let (x1, n1) = stats.get(&candidate.target_utterance);
        let (x2, n2) = stats.get(&candidate.source_utterance);
        let test = two_proportion_z_test(x1, n1, x2, n2);
        let rejected = test.is_some_and(|t| t.p_value < p_threshold);
        report.push(BlacklistDecision {
            source_utterance: candidate.source_utterance.clone(),
            target_utterance: candidate.target_utterance.clone(),
            test,
            rejected,
            insufficient_data: test.is_none(),
        });
        if !rejected {
            kept.push(candidate);
        }
    }
    (kept, report)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RewriteTable {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            entries: BTreeMap::new(),
            provenance,
        }
    }

    /// Builds a table, keeping the highest-scoring candidate per source.
    pub fn from_candidates(candidates: impl IntoIterator<Item = RewriteCandidate>, provenance: Provenance) -> Self {
        let mut table = Self::new(provenance);
        for c in candidates {
            if c.source_utterance == c.target_utterance {
                continue;
            }
            match table.entries.get(&c.source_utterance) {
                Some(existing) if existing.score >= c.score => {}
                _ => {
                    table.entries.insert(c.source_utterance.clone(), c);
                }
            }
        }
        table
    }

    pub fn get(&self, source: &str) -> Option<&RewriteCandidate> {
        self.entries.get(source)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &RewriteCandidate> {
        self.entries.values()
    }

    pub fn insert(&mut self, candidate: RewriteCandidate) {
        self.entries.insert(candidate.source_utterance.clone(), candidate);
    }

    /// Writes the two header lines and then
    /// `source \t target \t score \t support \t mined_at`, sorted by source.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let p = &self.provenance;
        writeln!(
            out,
            "#provenance\tconfig_hash={}\tcorpus_id={}\tmined_at={}",
            tsv::escape(&p.config_hash),
            tsv::escape(&p.corpus_id),
            p.mined_at
        )?;
        writeln!(out, "#source\ttarget\tscore\tsupport\tmined_at")?;
        for c in self.entries.values() {
            writeln!(
                out,
                "{}\t{}\t{:?}\t{}\t{}",
                tsv::escape(&c.source_utterance),
                tsv::escape(&c.target_utterance),
                c.score,
                c.support,
                c.mined_at
            )?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Content hash of the exported form, used as the table version.
    pub fn version(&self) -> String {
        sha256_hex(&self.to_bytes())[..16].to_string()
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self, TableError> {
        let mut table = RewriteTable::default();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            let malformed = |reason: String| TableError::Malformed {
                line: idx + 1,
                reason,
            };
            if let Some(rest) = line.strip_prefix("#provenance\t") {
                for field in tsv::split_fields(rest) {
                    match field.split_once('=') {
                        Some(("config_hash", v)) => table.provenance.config_hash = v.to_string(),
                        Some(("corpus_id", v)) => table.provenance.corpus_id = v.to_string(),
                        Some(("mined_at", v)) => {
                            table.provenance.mined_at =
                                v.parse().map_err(|_| malformed(format!("bad mined_at `{v}`")))?
                        }
                        _ => return Err(malformed(format!("unknown provenance field `{field}`"))),
                    }
                }
                continue;
            }
            if !tsv::is_data_line(&line) {
                continue;
            }
            let fields = tsv::split_fields(&line);
            if fields.len() < 5 {
                return Err(malformed(format!("expected 5 fields, got {}", fields.len())));
            }
            let score: f64 = fields[2]
                .parse()
                .map_err(|_| malformed(format!("bad score `{}`", fields[2])))?;
            let support: u64 = fields[3]
                .parse()
                .map_err(|_| malformed(format!("bad support `{}`", fields[3])))?;
            let mined_at: u64 = fields[4]
                .parse()
                .map_err(|_| malformed(format!("bad mined_at `{}`", fields[4])))?;
            let (source, target) = (fields[0].clone(), fields[1].clone());
            if source.is_empty() || target.is_empty() {
                return Err(malformed("empty utterance".into()));
            }
            if source == target {
                return Err(malformed("rewrite target equals source".into()));
            }
            if !(score > 0.0 && score.is_finite()) {
                return Err(malformed("score must be positive".into()));
            }
            if table.entries.contains_key(&source) {
                return Err(malformed(format!("duplicate source `{source}`")));
            }
            table.entries.insert(
                source.clone(),
                RewriteCandidate {
                    source_utterance: source,
                    target_utterance: target,
                    score,
                    support,
                    mined_at,
                },
            );
        }
        Ok(table)
    }
}

/// Merges daily tables: per source, the most recently mined entry wins.
/// Equal timestamps fall back to larger support, then the smaller target.
/// The result does not depend on the order of `tables`.
pub fn resolve_conflicts(tables: &[RewriteTable]) -> RewriteTable {
    let mut winners: BTreeMap<String, RewriteCandidate> = BTreeMap::new();
    for table in tables {
        for c in table.entries.values() {
            let Some(current) = winners.get(&c.source_utterance) else {
                winners.insert(c.source_utterance.clone(), c.clone());
                continue;
            };
            if current.mined_at == c.mined_at && current.target_utterance != c.target_utterance {
                warn!(
                    "conflicting rewrites for `{}` mined at the same time: `{}` vs `{}`",
                    c.source_utterance, current.target_utterance, c.target_utterance
                );
            }
            let rank = |x: &RewriteCandidate| (x.mined_at, x.support, Reverse(x.target_utterance.clone()));
            if rank(c) > rank(current) {
                winners.insert(c.source_utterance.clone(), c.clone());
            }
        }
    }
    let mut config_hashes: Vec<&str> = tables.iter().map(|t| t.provenance.config_hash.as_str()).collect();
    let mut corpora: Vec<&str> = tables.iter().map(|t| t.provenance.corpus_id.as_str()).collect();
    config_hashes.sort_unstable();
    corpora.sort_unstable();
    RewriteTable {
        entries: winners,
        provenance: Provenance {
            config_hash: sha256_hex(config_hashes.join("\n").as_bytes())[..16].to_string(),
            corpus_id: format!("merged-{}", &sha256_hex(corpora.join("\n").as_bytes())[..16]),
            mined_at: tables.iter().map(|t| t.provenance.mined_at).max().unwrap_or(0),
        },
    }
}
