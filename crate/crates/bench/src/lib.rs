//! Benchmark fixtures shared by the criterion targets.

use reformulator::ingest::{build_sessions, IngestConfig};
use reformulator::interpretation::project;
use reformulator::simulator::{generate, presets};
use reformulator::{InterpretationGraph, RewriteTable};

/// Interpretation graph mined from a simulated planted world.
pub fn planted_graph(population: usize) -> InterpretationGraph {
    let spec = presets::planted_world(8, population);
    let (events, _) = generate(&spec, 1).expect("preset world is valid");
    let raw: Vec<_> = events.into_iter().map(|e| e.event).collect();
    let (sessions, _) = build_sessions(&raw, &IngestConfig::default()).expect("valid gap");
    InterpretationGraph::build(&project(&sessions).sessions)
}

/// A random-looking but deterministic graph with `states` states and a few
/// edges per state, to exercise the solver beyond tiny worlds.
pub fn synthetic_graph(states: usize) -> InterpretationGraph {
    use reformulator::markov_graph::KeyedTarget;
    use reformulator::{AbsorbingLabel, InterpretationKey};
    let key = |i: usize| -> InterpretationKey { format!("Bench|Intent{i}").parse().expect("valid key") };
    let mut edges = Vec::new();
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut next = || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        x
    };
    for i in 0..states {
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..3 {
            let j = (next() as usize) % states;
            if seen.insert(j) {
                edges.push(((key(i), KeyedTarget::State(key(j))), 1 + next() % 5));
            }
        }
        edges.push(((key(i), KeyedTarget::Absorbing(AbsorbingLabel::Success)), 1 + next() % 5));
        edges.push(((key(i), KeyedTarget::Absorbing(AbsorbingLabel::Failure)), 1 + next() % 3));
    }
    InterpretationGraph::from_edges(edges)
}

/// A table with `n` synthetic entries.
pub fn synthetic_table(n: usize) -> RewriteTable {
    use reformulator::{Provenance, RewriteCandidate};
    RewriteTable::from_candidates(
        (0..n).map(|i| RewriteCandidate {
            source_utterance: format!("play song number {i}"),
            target_utterance: format!("play track {i}"),
            score: 0.5,
            support: 10,
            mined_at: 0,
        }),
        Provenance::default(),
    )
}
