//! Mining query reformulations from conversational session logs.
//!
//! The pipeline runs raw utterance events through sessionization
//! ([`ingest`]), projects them into interpretation space
//! ([`interpretation`]), builds an absorbing Markov chain over the
//! interpretations ([`markov_graph`]), solves it for per-source success
//! vectors ([`solver`]) and lifts the winners back to utterances as a
//! key-value rewrite table ([`rewrite_miner`]). The table is served by
//! [`service`]; [`simulator`] synthesizes corpora with planted
//! reformulation patterns for end-to-end checks.

pub mod ingest;
pub mod interpretation;
pub mod markov_graph;
pub mod pipeline;
pub mod rewrite_miner;
pub mod service;
pub mod simulator;
pub mod solver;
pub mod text;
pub mod tsv;

pub use ingest::{
    AbsorbingLabel, FeedbackKind, FeedbackSignal, IngestConfig, IngestStats, RawSession, Session,
    SessionKey, UtteranceEvent,
};
pub use interpretation::{BipartiteCounts, InterpretationKey, LatentSession, Projection};
pub use markov_graph::{InterpretationGraph, StateId, Target, TransitionMatrixView};
pub use pipeline::{mine, MineConfig, MineOutput};
pub use rewrite_miner::{
    FrictionStats, Provenance, RewriteCandidate, RewriteTable, SuccessTable,
};
pub use service::{Decision, LookupRequest, LookupResponse, RewriteService};
pub use simulator::{GroundTruth, WorldSpec};
pub use solver::{BestTarget, SolveConfig, SolveMethod, SuccessVector};
