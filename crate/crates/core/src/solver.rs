//! Success vectors of the absorbing chain.
//!
//! For a source state `s`, the success score of a target `t` is
//! `N[s,t] * P(r+|t)` with `N = (I - Q)^-1` the fundamental matrix: the
//! expected number of visits to `t` before absorption times the one-step
//! success probability of `t`. Equivalently, it is the probability that a
//! walk from `s` is absorbed into success directly from `t`.
//!
//! Two solvers produce these vectors:
//!
//! * [`success_vector_exact`] solves `(I - Q)^T x = e_s` on the closure of
//!   states reachable from `s`, which yields row `s` of `N` exactly.
//! * [`success_vector_bfs`] collects simple paths from `s` up to a fixed
//!   depth, pruning low-probability prefixes, and solves exactly on the
//!   visited states only. Mass leaving that set is dropped, so its entries
//!   never exceed the exact ones.
//!
//! [`monte_carlo_success`] estimates the same quantities by simulation and
//! exists for verification only.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, Write};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::AbsorbingLabel;
use crate::interpretation::{InterpretationKey, KeyError};
use crate::markov_graph::{InterpretationGraph, SparseMatrix, StateId, TransitionMatrixView};
use crate::tsv;

/// Values closer than this count as tied in [`best_target`].
pub const TIE_TOLERANCE: f64 = 1e-12;

/// A row whose transient mass is at least `1 - ESCAPE_SLACK` has no way out.
const ESCAPE_SLACK: f64 = 1e-12;

const MAX_WALK_STEPS: usize = 100_000;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("states {component:?} form a closed class with no absorbing escape")]
    NoAbsorbingEscape { component: Vec<String> },
    #[error("I - Q is numerically singular")]
    Singular,
    #[error("invalid solve config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vectors file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SolveMethod {
    #[default]
    Exact,
    BoundedBfs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub max_depth: usize,
    pub prune_epsilon: f64,
    pub method: SolveMethod,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_depth: 5,
            prune_epsilon: 1e-6,
            method: SolveMethod::Exact,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.max_depth < 1 {
            return Err(SolveError::InvalidConfig("max_depth must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.prune_epsilon) {
            return Err(SolveError::InvalidConfig("prune_epsilon must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Row `s` of `P = N diag(r+)` restricted to states reachable from `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessVector {
    pub source: InterpretationKey,
    /// `P(r+|source)`.
    pub own_success: f64,
    /// Raw scores. They count expected visits, so they can exceed 1 when
    /// the target sits on a cycle; use [`SuccessVector::phi`] for the
    /// reported value.
    pub entries: BTreeMap<InterpretationKey, f64>,
}

impl SuccessVector {
    pub fn empty(source: InterpretationKey) -> Self {
        Self {
            source,
            own_success: 0.0,
            entries: BTreeMap::new(),
        }
    }

    /// Clamped score in `[0, 1]`.
    pub fn phi(&self, target: &InterpretationKey) -> f64 {
        self.entries.get(target).map(|v| v.min(1.0)).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BestTarget {
    Rewrite { target: InterpretationKey, phi: f64 },
    NoRewrite,
}

impl BestTarget {
    pub fn is_rewrite(&self) -> bool {
        matches!(self, BestTarget::Rewrite { .. })
    }
}

/// The state set of the closed class that traps probability mass, if any.
///
/// A row escapes when its transient mass is below one (it leaks into an
/// absorbing state or out of the matrix). States that cannot reach an
/// escaping row make `I - Q` singular.
pub fn trapped_component(q: &SparseMatrix) -> Option<Vec<usize>> {
    let n = q.dim();
    let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for (j, _) in q.row(i) {
            reverse[*j].push(i);
        }
    }
    let mut escapes = vec![false; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| q.row_sum(i) < 1.0 - ESCAPE_SLACK).collect();
    for &i in &queue {
        escapes[i] = true;
    }
    while let Some(j) = queue.pop_front() {
        for &i in &reverse[j] {
            if !escapes[i] {
                escapes[i] = true;
                queue.push_back(i);
            }
        }
    }
    let seed = (0..n).find(|&i| !escapes[i])?;
    // the component of `seed` within the trapped set: forward-reachable and
    // backward-reachable from it
    let forward = reach(n, seed, |i| q.row(i).iter().map(|(j, _)| *j).collect());
    let backward = reach(n, seed, |i| reverse[i].clone());
    Some(
        (0..n)
            .filter(|&i| forward[i] && backward[i] && !escapes[i])
            .collect(),
    )
}

fn reach(n: usize, start: usize, next: impl Fn(usize) -> Vec<usize>) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        for j in next(i) {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

fn identity_minus(q: &SparseMatrix) -> DMatrix<f64> {
    let n = q.dim();
    let mut a = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for (j, v) in q.row(i) {
            a[(i, *j)] -= v;
        }
    }
    a
}

fn check_escape(q: &SparseMatrix, name: impl Fn(usize) -> String) -> Result<(), SolveError> {
    match trapped_component(q) {
        Some(component) => Err(SolveError::NoAbsorbingEscape {
            component: component.into_iter().map(name).collect(),
        }),
        None => Ok(()),
    }
}

/// `N = (I - Q)^-1`.
pub fn fundamental_matrix(q: &SparseMatrix) -> Result<DMatrix<f64>, SolveError> {
    check_escape(q, |i| i.to_string())?;
    let n = q.dim();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    identity_minus(q).lu().try_inverse().ok_or(SolveError::Singular)
}

/// Row `s` of `N`, via `(I - Q)^T x = e_s`.
pub fn fundamental_row(q: &SparseMatrix, s: usize) -> Result<Vec<f64>, SolveError> {
    check_escape(q, |i| i.to_string())?;
    fundamental_row_unchecked(q, s)
}

fn fundamental_row_unchecked(q: &SparseMatrix, s: usize) -> Result<Vec<f64>, SolveError> {
    let n = q.dim();
    let a = identity_minus(q).transpose();
    let mut e = DVector::<f64>::zeros(n);
    e[s] = 1.0;
    let x = a.lu().solve(&e).ok_or(SolveError::Singular)?;
    Ok(x.iter().copied().collect())
}

/// Local indices reachable from `s` through `Q`, `s` included.
fn reachable_local(q: &SparseMatrix, s: usize) -> Vec<bool> {
    let mut seen = vec![false; q.dim()];
    let mut queue = VecDeque::from([s]);
    seen[s] = true;
    while let Some(i) = queue.pop_front() {
        for (j, _) in q.row(i) {
            if !seen[*j] {
                seen[*j] = true;
                queue.push_back(*j);
            }
        }
    }
    seen
}

/// Success vector of `source` computed on `view`:
/// `entries[t] = N[s,t] * r+[t]` for every `t` reachable from `s` inside the
/// view.
pub fn success_vector_exact(
    graph: &InterpretationGraph,
    view: &TransitionMatrixView,
    source: StateId,
) -> Result<SuccessVector, SolveError> {
    let key = graph.key(source).clone();
    let Some(s) = view.local_index(source) else {
        return Ok(SuccessVector::empty(key));
    };
    check_escape(&view.q, |i| graph.key(view.states[i]).to_string())?;
    let row = fundamental_row_unchecked(&view.q, s)?;
    let reachable = reachable_local(&view.q, s);
    let entries = (0..view.dim())
        .filter(|&t| reachable[t])
        .map(|t| (graph.key(view.states[t]).clone(), row[t] * view.r[t][0]))
        .collect();
    Ok(SuccessVector {
        source: key,
        own_success: view.r[s][0],
        entries,
    })
}

/// Exact solve on the closure of states reachable from `source`. The
/// closure is closed under transient edges, so this equals the solve on the
/// full matrix.
pub fn solve_exact(graph: &InterpretationGraph, source: StateId) -> Result<SuccessVector, SolveError> {
    if source.0 >= graph.len() {
        return Err(SolveError::InvalidConfig(format!("unknown source {source}")));
    }
    let view = graph.to_matrix(&graph.reachable(source));
    success_vector_exact(graph, &view, source)
}

/// States visited by simple paths from `source` of at most `max_depth`
/// transient steps, skipping extensions whose path probability falls below
/// `prune_epsilon`. Paths stop at absorption.
pub fn collect_paths(graph: &InterpretationGraph, source: StateId, config: &SolveConfig) -> Vec<StateId> {
    let mut visited = vec![false; graph.len()];
    visited[source.0] = true;
    let mut frontier: Vec<(Vec<StateId>, f64)> = vec![(vec![source], 1.0)];
    for _ in 0..config.max_depth {
        let mut next = Vec::new();
        for (path, prob) in &frontier {
            let tail = *path.last().expect("non-empty path");
            for (t, p) in graph.successors(tail) {
                if path.contains(&t) {
                    continue;
                }
                let extended = prob * p;
                if extended < config.prune_epsilon {
                    continue;
                }
                visited[t.0] = true;
                let mut longer = path.clone();
                longer.push(t);
                next.push((longer, extended));
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    visited
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(i, _)| StateId(i))
        .collect()
}

/// Approximate success vector from a bounded path search around `source`.
///
/// All edges among the visited states enter the local matrix, self-loops
/// and back edges included, so recurrence is still modelled locally even
/// though paths themselves are simple.
pub fn success_vector_bfs(
    graph: &InterpretationGraph,
    source: StateId,
    config: &SolveConfig,
) -> Result<SuccessVector, SolveError> {
    config.validate()?;
    if source.0 >= graph.len() {
        return Ok(SuccessVector::empty(InterpretationKey::unparsed()));
    }
    let local = collect_paths(graph, source, config);
    let view = graph.to_matrix(&local);
    success_vector_exact(graph, &view, source)
}

/// Success vector of a source given by key; unknown keys give an empty
/// vector.
pub fn success_vector(
    graph: &InterpretationGraph,
    source: &InterpretationKey,
    config: &SolveConfig,
) -> Result<SuccessVector, SolveError> {
    let Some(id) = graph.id(source) else {
        return Ok(SuccessVector::empty(source.clone()));
    };
    match config.method {
        SolveMethod::Exact => solve_exact(graph, id),
        SolveMethod::BoundedBfs => success_vector_bfs(graph, id, config),
    }
}

/// Solves every state in parallel. Sources whose solve fails are logged and
/// left out.
pub fn solve_all(graph: &InterpretationGraph, config: &SolveConfig) -> Result<Vec<SuccessVector>, SolveError> {
    config.validate()?;
    let results: Vec<_> = graph
        .state_ids()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|id| match config.method {
            SolveMethod::Exact => solve_exact(graph, id),
            SolveMethod::BoundedBfs => success_vector_bfs(graph, id, config),
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for (id, result) in graph.state_ids().zip(results) {
        match result {
            Ok(v) => out.push(v),
            Err(e) => warn!("skipping source {}: {e}", graph.key(id)),
        }
    }
    Ok(out)
}

/// Picks the target with the highest raw score.
///
/// Returns [`BestTarget::NoRewrite`] when the vector is empty, when the
/// source itself is among the maxima, or when the winner's clamped score
/// does not strictly beat `own_success`. Remaining ties go to the smallest
/// key.
pub fn best_target(vector: &SuccessVector) -> BestTarget {
    let mut best: Option<(&InterpretationKey, f64)> = None;
    for (key, value) in &vector.entries {
        match best {
            Some((_, b)) if *value <= b + TIE_TOLERANCE => {}
            _ => best = Some((key, *value)),
        }
    }
    let Some((winner, value)) = best else {
        return BestTarget::NoRewrite;
    };
    if let Some(own) = vector.entries.get(&vector.source) {
        if (own - value).abs() <= TIE_TOLERANCE || winner == &vector.source {
            return BestTarget::NoRewrite;
        }
    }
    let phi = value.min(1.0);
    if phi > vector.own_success {
        BestTarget::Rewrite {
            target: winner.clone(),
            phi,
        }
    } else {
        BestTarget::NoRewrite
    }
}

/// Empirical counterpart of a success vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate {
    pub walks: u64,
    /// Fraction of walks absorbed into success directly from each state.
    pub entries: BTreeMap<StateId, f64>,
    /// Fraction of walks absorbed into success at all.
    pub success_rate: f64,
    /// Walks that hit an empty row or the step cap before absorbing.
    pub unabsorbed: u64,
}

/// Seeded random walks from `source` until absorption.
///
/// The estimate for `t` is the fraction of walks whose absorption into
/// success happens from `t`. That event occurs at most once per walk and its
/// expectation is `N[s,t] * P(r+|t)`.
pub fn monte_carlo_success(graph: &InterpretationGraph, source: StateId, walks: u64, seed: u64) -> MonteCarloEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(source.0 as u64);
    let mut hits: HashMap<StateId, u64> = HashMap::new();
    let mut unabsorbed = 0;
    let mut successes = 0;
    if source.0 < graph.len() {
        for _ in 0..walks {
            match walk(graph, source, &mut rng) {
                Some((last, AbsorbingLabel::Success)) => {
                    *hits.entry(last).or_default() += 1;
                    successes += 1;
                }
                Some((_, AbsorbingLabel::Failure)) => {}
                None => unabsorbed += 1,
            }
        }
    }
    let n = walks.max(1) as f64;
    MonteCarloEstimate {
        walks,
        entries: hits.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
        success_rate: successes as f64 / n,
        unabsorbed,
    }
}

fn walk(graph: &InterpretationGraph, source: StateId, rng: &mut ChaCha8Rng) -> Option<(StateId, AbsorbingLabel)> {
    let mut state = source;
    for _ in 0..MAX_WALK_STEPS {
        let row = graph.row(state)?;
        let total = row.total();
        if total == 0 {
            return None;
        }
        let mut pick = rng.random_range(0..total);
        let mut next = None;
        for (t, c) in &row.transient {
            if pick < *c {
                next = Some(*t);
                break;
            }
            pick -= c;
        }
        match next {
            Some(t) => state = t,
            None if pick < row.success => return Some((state, AbsorbingLabel::Success)),
            None => return Some((state, AbsorbingLabel::Failure)),
        }
    }
    None
}

/// Writes `source_key \t target_key \t phi \t own_success \t phi_raw`,
/// sorted by source then target. `phi` is clamped to 1.
pub fn write_vectors<W: Write>(vectors: &[SuccessVector], mut out: W) -> std::io::Result<()> {
    let mut sorted: Vec<&SuccessVector> = vectors.iter().collect();
    sorted.sort_by(|a, b| a.source.cmp(&b.source));
    writeln!(out, "# source_key\ttarget_key\tphi\town_success\tphi_raw")?;
    for v in sorted {
        for (target, raw) in &v.entries {
            writeln!(
                out,
                "{}\t{}\t{:?}\t{:?}\t{:?}",
                tsv::escape(v.source.as_str()),
                tsv::escape(target.as_str()),
                raw.min(1.0),
                v.own_success,
                raw
            )?;
        }
    }
    Ok(())
}

pub fn read_vectors<R: BufRead>(input: R) -> Result<Vec<SuccessVector>, SolveError> {
    let mut by_source: BTreeMap<InterpretationKey, SuccessVector> = BTreeMap::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if !tsv::is_data_line(&line) {
            continue;
        }
        let malformed = |reason: String| SolveError::Malformed {
            line: idx + 1,
            reason,
        };
        let fields = tsv::split_fields(&line);
        if fields.len() < 4 {
            return Err(malformed(format!("expected at least 4 fields, got {}", fields.len())));
        }
        let key = |s: &str| s.parse::<InterpretationKey>().map_err(|e: KeyError| malformed(e.to_string()));
        let num = |s: &str| s.parse::<f64>().map_err(|_| malformed(format!("bad number `{s}`")));
        let source = key(&fields[0])?;
        let target = key(&fields[1])?;
        let phi = num(&fields[2])?;
        let own = num(&fields[3])?;
        let raw = match fields.get(4) {
            Some(f) if !f.is_empty() => num(f)?,
            _ => phi,
        };
        let entry = by_source
            .entry(source.clone())
            .or_insert_with(|| SuccessVector {
                source,
                own_success: own,
                entries: BTreeMap::new(),
            });
        entry.entries.insert(target, raw);
    }
    Ok(by_source.into_values().collect())
}
