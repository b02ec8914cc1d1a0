//! End-to-end mining: sessions in, rewrite table out.

use log::info;

use crate::ingest::{IngestStats, Session};
use crate::interpretation::{project, BipartiteCounts};
use crate::markov_graph::InterpretationGraph;
use crate::rewrite_miner::{
    blacklist_filter, lift_to_utterances, sha256_hex, BlacklistDecision, FrictionStats, LiftConfig, Provenance,
    RewriteTable, SuccessTable, DEFAULT_P_THRESHOLD,
};
use crate::solver::{solve_all, SolveConfig, SolveError, SuccessVector};

#[derive(Debug, Clone, PartialEq)]
pub struct MineConfig {
    pub min_edge_count: u64,
    pub min_pair_count: u64,
    pub solve: SolveConfig,
    pub lift: LiftConfig,
    pub p_threshold: f64,
    pub corpus_id: String,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            min_edge_count: 1,
            min_pair_count: 1,
            solve: SolveConfig::default(),
            lift: LiftConfig::default(),
            p_threshold: DEFAULT_P_THRESHOLD,
            corpus_id: String::new(),
        }
    }
}

impl MineConfig {
    /// Stable digest of every knob that affects the mined table.
    pub fn config_hash(&self) -> String {
        let stoplist: Vec<&String> = self.lift.target_stoplist.iter().collect();
        let canonical = format!(
            "min_edge_count={}\nmin_pair_count={}\nmethod={:?}\nmax_depth={}\nprune_epsilon={:?}\ntop_k={}\nmin_support={}\np_threshold={:?}\nstoplist={:?}\n",
            self.min_edge_count,
            self.min_pair_count,
            self.solve.method,
            self.solve.max_depth,
            self.solve.prune_epsilon,
            self.lift.top_k,
            self.lift.min_support,
            self.p_threshold,
            stoplist,
        );
        sha256_hex(canonical.as_bytes())[..16].to_string()
    }
}

#[derive(Debug, Clone)]
pub struct MineOutput {
    pub graph: InterpretationGraph,
    pub counts: BipartiteCounts,
    pub vectors: Vec<SuccessVector>,
    pub friction: FrictionStats,
    pub blacklist: Vec<BlacklistDecision>,
    pub table: RewriteTable,
}

pub fn mine(sessions: &[Session], config: &MineConfig) -> Result<MineOutput, SolveError> {
    config.solve.validate()?;
    let projection = project(sessions);
    let counts = projection.counts.filtered(config.min_pair_count);
    let graph = InterpretationGraph::build_with_min_count(&projection.sessions, config.min_edge_count);
    let vectors = solve_all(&graph, &config.solve)?;
    let table_in = SuccessTable::new(vectors.iter().cloned());
    let candidates = lift_to_utterances(&table_in, &counts, &config.lift);
    let friction = FrictionStats::from_sessions(sessions);
    let (kept, blacklist) = blacklist_filter(candidates, &friction, config.p_threshold);
    let rejected = blacklist.iter().filter(|d| d.rejected).count();
    info!(
        "mined {} sessions: {} states, {} candidates, {} rejected",
        sessions.len(),
        graph.len(),
        kept.len() + rejected,
        rejected
    );
    let table = RewriteTable::from_candidates(
        kept,
        Provenance {
            config_hash: config.config_hash(),
            corpus_id: config.corpus_id.clone(),
            mined_at: config.lift.mined_at,
        },
    );
    Ok(MineOutput {
        graph,
        counts,
        vectors,
        friction,
        blacklist,
        table,
    })
}

/// Corpus identifier derived from session contents and ingest stats.
pub fn corpus_id(sessions: &[Session], stats: &IngestStats) -> String {
    let mut buf = Vec::new();
    crate::ingest::write_sessions(sessions, &mut buf).expect("in-memory write");
    buf.extend(format!("{}:{}", stats.events, stats.sessions).bytes());
    sha256_hex(&buf)[..16].to_string()
}
