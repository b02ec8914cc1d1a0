//! The absorbing chain over interpretation space.
//!
//! Transient states are interpretation keys; every latent session contributes
//! one outgoing edge per element, the last one into its absorbing label.
//! Counts are kept as integers and probabilities derived on demand as
//! `c(h_i, v) / Z_i`.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::AbsorbingLabel;
use crate::interpretation::{InterpretationKey, KeyError, LatentSession};
use crate::tsv;

pub const SUCCESS_TOKEN: &str = "(+)";
pub const FAILURE_TOKEN: &str = "(-)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub usize);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    State(StateId),
    Absorbing(AbsorbingLabel),
}

/// Edge target addressed by key, used while counting and in files.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyedTarget {
    State(InterpretationKey),
    Absorbing(AbsorbingLabel),
}

impl KeyedTarget {
    fn token(&self) -> &str {
        match self {
            KeyedTarget::State(key) => key.as_str(),
            KeyedTarget::Absorbing(AbsorbingLabel::Success) => SUCCESS_TOKEN,
            KeyedTarget::Absorbing(AbsorbingLabel::Failure) => FAILURE_TOKEN,
        }
    }

    fn parse(token: &str) -> Result<Self, KeyError> {
        Ok(match token {
            SUCCESS_TOKEN => KeyedTarget::Absorbing(AbsorbingLabel::Success),
            FAILURE_TOKEN => KeyedTarget::Absorbing(AbsorbingLabel::Failure),
            key => KeyedTarget::State(key.parse()?),
        })
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown state {0}")]
    UnknownState(StateId),
    #[error("state {0} has no outgoing edges")]
    EmptyRow(StateId),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Outgoing counts of one transient state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Row {
    /// Sorted by target id.
    pub transient: Vec<(StateId, u64)>,
    pub success: u64,
    pub failure: u64,
}

impl Row {
    /// `Z_i`.
    pub fn total(&self) -> u64 {
        self.transient.iter().map(|(_, c)| c).sum::<u64>() + self.success + self.failure
    }

    pub fn count(&self, target: Target) -> u64 {
        match target {
            Target::State(id) => self
                .transient
                .binary_search_by_key(&id, |(t, _)| *t)
                .map(|i| self.transient[i].1)
                .unwrap_or(0),
            Target::Absorbing(AbsorbingLabel::Success) => self.success,
            Target::Absorbing(AbsorbingLabel::Failure) => self.failure,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterpretationGraph {
    states: Vec<InterpretationKey>,
    index: HashMap<InterpretationKey, StateId>,
    rows: Vec<Row>,
}

type EdgeCounts = HashMap<(InterpretationKey, KeyedTarget), u64>;

fn count_session(acc: &mut EdgeCounts, session: &LatentSession) {
    for pair in session.states.windows(2) {
        *acc.entry((pair[0].clone(), KeyedTarget::State(pair[1].clone())))
            .or_default() += 1;
    }
    if let Some(last) = session.states.last() {
        *acc.entry((last.clone(), KeyedTarget::Absorbing(session.label)))
            .or_default() += 1;
    }
}

impl InterpretationGraph {
    pub fn build(sessions: &[LatentSession]) -> Self {
        Self::build_with_min_count(sessions, 1)
    }

    /// Counts every adjacent pair and every terminal absorption, then drops
    /// edges seen fewer than `min_edge_count` times. `Z_i` is computed over
    /// the surviving edges.
    pub fn build_with_min_count(sessions: &[LatentSession], min_edge_count: u64) -> Self {
        let counts = sessions
            .par_iter()
            .fold(EdgeCounts::new, |mut acc, s| {
                count_session(&mut acc, s);
                acc
            })
            .reduce(EdgeCounts::new, |mut a, b| {
                for (edge, c) in b {
                    *a.entry(edge).or_default() += c;
                }
                a
            });
        Self::from_edges(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_edge_count.max(1)),
        )
    }

    /// Assembles a graph from keyed edge counts. The state set is every key
    /// appearing on either end of an edge.
    pub fn from_edges(edges: impl IntoIterator<Item = ((InterpretationKey, KeyedTarget), u64)>) -> Self {
        let edges: BTreeMap<(InterpretationKey, KeyedTarget), u64> = {
            let mut m = BTreeMap::new();
            for (edge, c) in edges {
                if c > 0 {
                    *m.entry(edge).or_insert(0) += c;
                }
            }
            m
        };
        let mut keys: BTreeSet<InterpretationKey> = BTreeSet::new();
        for (source, target) in edges.keys() {
            keys.insert(source.clone());
            if let KeyedTarget::State(t) = target {
                keys.insert(t.clone());
            }
        }
        let states: Vec<InterpretationKey> = keys.into_iter().collect();
        let index: HashMap<InterpretationKey, StateId> = states
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), StateId(i)))
            .collect();
        let mut rows = vec![Row::default(); states.len()];
        for ((source, target), c) in edges {
            let row = &mut rows[index[&source].0];
            match target {
                KeyedTarget::State(t) => row.transient.push((index[&t], c)),
                KeyedTarget::Absorbing(AbsorbingLabel::Success) => row.success += c,
                KeyedTarget::Absorbing(AbsorbingLabel::Failure) => row.failure += c,
            }
        }
        for row in &mut rows {
            row.transient.sort_unstable();
        }
        Self {
            states,
            index,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_ids(&self) -> impl Iterator<Item = StateId> {
        (0..self.states.len()).map(StateId)
    }

    pub fn id(&self, key: &InterpretationKey) -> Option<StateId> {
        self.index.get(key).copied()
    }

    pub fn key(&self, id: StateId) -> &InterpretationKey {
        &self.states[id.0]
    }

    pub fn keys(&self) -> &[InterpretationKey] {
        &self.states
    }

    pub fn row(&self, id: StateId) -> Option<&Row> {
        self.rows.get(id.0)
    }

    /// `c(h_i, v)`.
    pub fn count(&self, source: StateId, target: Target) -> u64 {
        self.rows.get(source.0).map(|r| r.count(target)).unwrap_or(0)
    }

    /// `Z_i`.
    pub fn row_total(&self, source: StateId) -> u64 {
        self.rows.get(source.0).map(Row::total).unwrap_or(0)
    }

    /// Sum of all edge counts.
    pub fn total_edges(&self) -> u64 {
        self.rows.iter().map(Row::total).sum()
    }

    /// `c(h_i, v) / Z_i`; zero for absent edges.
    pub fn transition_prob(&self, source: StateId, target: Target) -> Result<f64, GraphError> {
        let row = self.row(source).ok_or(GraphError::UnknownState(source))?;
        let total = row.total();
        if total == 0 {
            return Err(GraphError::EmptyRow(source));
        }
        Ok(row.count(target) as f64 / total as f64)
    }

    /// Transient successors with their probabilities.
    pub fn successors(&self, source: StateId) -> impl Iterator<Item = (StateId, f64)> + '_ {
        let row = &self.rows[source.0];
        let total = row.total() as f64;
        row.transient.iter().map(move |(t, c)| (*t, *c as f64 / total))
    }

    /// One-step success probability `P(r+|h)`; zero for an empty row.
    pub fn success_prob(&self, source: StateId) -> f64 {
        match self.row(source) {
            Some(row) if row.total() > 0 => row.success as f64 / row.total() as f64,
            _ => 0.0,
        }
    }

    /// States reachable from `source` through transient edges, `source`
    /// included, in ascending id order.
    pub fn reachable(&self, source: StateId) -> Vec<StateId> {
        if source.0 >= self.len() {
            return Vec::new();
        }
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([source]);
        seen[source.0] = true;
        while let Some(s) = queue.pop_front() {
            for (t, _) in &self.rows[s.0].transient {
                if !seen[t.0] {
                    seen[t.0] = true;
                    queue.push_back(*t);
                }
            }
        }
        seen.iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .map(|(i, _)| StateId(i))
            .collect()
    }

    /// Extracts `[Q | R]` over `subset`. Transient mass that leaves the
    /// subset is dropped rather than redirected, so a non-closed subset
    /// under-estimates absorption into success.
    pub fn to_matrix(&self, subset: &[StateId]) -> TransitionMatrixView {
        let mut states: Vec<StateId> = subset.iter().copied().filter(|s| s.0 < self.len()).collect();
        states.sort_unstable();
        states.dedup();
        let local: HashMap<StateId, usize> = states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let mut q = Vec::with_capacity(states.len());
        let mut r = Vec::with_capacity(states.len());
        for s in &states {
            let row = &self.rows[s.0];
            let total = row.total();
            if total == 0 {
                q.push(Vec::new());
                r.push([0.0, 0.0]);
                continue;
            }
            let z = total as f64;
            q.push(
                row.transient
                    .iter()
                    .filter_map(|(t, c)| local.get(t).map(|j| (*j, *c as f64 / z)))
                    .collect(),
            );
            r.push([row.success as f64 / z, row.failure as f64 / z]);
        }
        TransitionMatrixView {
            states,
            q: SparseMatrix::from_rows(q),
            r,
        }
    }

    pub fn to_full_matrix(&self) -> TransitionMatrixView {
        let all: Vec<StateId> = self.state_ids().collect();
        self.to_matrix(&all)
    }

    /// Writes `source_key \t target_key_or_label \t count`, sorted.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut lines: Vec<(&str, &str, u64)> = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            let source = self.states[i].as_str();
            for (t, c) in &row.transient {
                lines.push((source, self.states[t.0].as_str(), *c));
            }
            if row.success > 0 {
                lines.push((source, SUCCESS_TOKEN, row.success));
            }
            if row.failure > 0 {
                lines.push((source, FAILURE_TOKEN, row.failure));
            }
        }
        lines.sort_unstable();
        writeln!(out, "# source_key\ttarget_key_or_label\tcount")?;
        for (s, t, c) in lines {
            writeln!(out, "{}\t{}\t{}", tsv::escape(s), tsv::escape(t), c)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self, GraphError> {
        let mut edges: BTreeMap<(InterpretationKey, KeyedTarget), u64> = BTreeMap::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if !tsv::is_data_line(&line) {
                continue;
            }
            let malformed = |reason: String| GraphError::Malformed {
                line: idx + 1,
                reason,
            };
            let fields = tsv::split_fields(&line);
            if fields.len() < 3 {
                return Err(malformed(format!("expected 3 fields, got {}", fields.len())));
            }
            let source: InterpretationKey = fields[0].parse().map_err(|e: KeyError| malformed(e.to_string()))?;
            let target = KeyedTarget::parse(&fields[1]).map_err(|e| malformed(e.to_string()))?;
            let count: u64 = fields[2]
                .parse()
                .map_err(|_| malformed(format!("bad count `{}`", fields[2])))?;
            if count == 0 {
                return Err(malformed("zero count".into()));
            }
            if edges.insert((source, target), count).is_some() {
                return Err(malformed("duplicate edge".into()));
            }
        }
        Ok(Self::from_edges(edges))
    }

    /// Keyed edge list, for tests and merging.
    pub fn edges(&self) -> Vec<((InterpretationKey, KeyedTarget), u64)> {
        let mut out = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            let source = &self.states[i];
            for (t, c) in &row.transient {
                out.push(((source.clone(), KeyedTarget::State(self.states[t.0].clone())), *c));
            }
            if row.success > 0 {
                out.push(((source.clone(), KeyedTarget::Absorbing(AbsorbingLabel::Success)), row.success));
            }
            if row.failure > 0 {
                out.push(((source.clone(), KeyedTarget::Absorbing(AbsorbingLabel::Failure)), row.failure));
            }
        }
        out
    }
}

impl fmt::Display for KeyedTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Row-major sparse square matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMatrix {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    /// Each row's entries are sorted by column; zeros are dropped.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let rows = rows
            .into_iter()
            .map(|mut row| {
                row.retain(|(j, v)| *v != 0.0 && *j < n);
                row.sort_by_key(|(j, _)| *j);
                row
            })
            .collect();
        Self { rows }
    }

    pub fn from_dense(dense: &[Vec<f64>]) -> Self {
        Self::from_rows(
            dense
                .iter()
                .map(|row| row.iter().copied().enumerate().collect())
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |(c, _)| *c)
            .map(|k| self.rows[i][k].1)
            .unwrap_or(0.0)
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|(_, v)| v).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut out = vec![vec![0.0; n]; n];
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row {
                out[i][*j] = *v;
            }
        }
        out
    }
}

/// Canonical-form blocks `Q` and `R = [r+, r-]` over a set of states.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrixView {
    /// Global id of each local row, ascending.
    pub states: Vec<StateId>,
    pub q: SparseMatrix,
    pub r: Vec<[f64; 2]>,
}

impl TransitionMatrixView {
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn local_index(&self, id: StateId) -> Option<usize> {
        self.states.binary_search(&id).ok()
    }

    /// Sum of row `i` across `[Q | R]`.
    pub fn row_mass(&self, i: usize) -> f64 {
        self.q.row_sum(i) + self.r[i][0] + self.r[i][1]
    }

    pub fn r_plus(&self) -> Vec<f64> {
        self.r.iter().map(|r| r[0]).collect()
    }
}
