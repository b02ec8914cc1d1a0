#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reformulator::markov_graph::KeyedTarget;
use reformulator::{AbsorbingLabel, InterpretationGraph, InterpretationKey};

pub const H0: &str = "Music|PlayMusicIntent|SongName:despicable meat";
pub const H1: &str = "Music|PlayMusicIntent|SongName:despicable me";
pub const H2: &str = "Music|PlayMusicIntent|AlbumName:despicable me";
pub const H3: &str = "Music|PlayMusicIntent|PlaylistName:despicable me soundtrack";

/// Three sessions from three customers:
/// (a) u0 u1 u2 u4 ending in success, (b) u0 u3 u4 ending in success,
/// (c) u1 followed by "stop".
pub const EXAMPLE_LOG: &str = "\
# customer_id\tdevice_id\ttimestamp_ms\tutterance\tinterpretation_key\tfeedback_kind\tfeedback_detail\tresponse_category
cust-a\tdev-a\t1000\tplay despicable meat\tMusic|PlayMusicIntent|SongName:despicable meat\t\t\tno-match
cust-a\tdev-a\t9000\tplay despicable meat please\tMusic|PlayMusicIntent|SongName:despicable meat\t\t\tno-match
cust-a\tdev-a\t20000\tplay despicable me songs\tMusic|PlayMusicIntent|SongName:despicable me\t\t\tno-match
cust-a\tdev-a\t31000\tplay despicable me\tMusic|PlayMusicIntent|AlbumName:despicable me\t\t\tok
cust-b\tdev-b\t5000\tplay despicable meat\tMusic|PlayMusicIntent|SongName:despicable meat\t\t\tno-match
cust-b\tdev-b\t14000\tplay despicable me soundtrack\tMusic|PlayMusicIntent|PlaylistName:despicable me soundtrack\t\t\tunsupported
cust-b\tdev-b\t50000\tplay despicable me\tMusic|PlayMusicIntent|AlbumName:despicable me\t\t\tok
cust-c\tdev-c\t2000\tplay despicable meat please\tMusic|PlayMusicIntent|SongName:despicable meat\t\t\tno-match
cust-c\tdev-c\t6000\tstop\tGlobal|StopIntent\t\t\tok
";

pub fn key(s: &str) -> InterpretationKey {
    s.parse().expect("valid key")
}

fn k(i: usize) -> InterpretationKey {
    key(&format!("Test|S{i:03}"))
}

/// Random graph with `n` states. Every state has some absorbing mass, so
/// every transient set can escape.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, max_out: usize, max_count: u64) -> InterpretationGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        let out = rng.random_range(0..=max_out);
        let mut targets: Vec<usize> = (0..out).map(|_| rng.random_range(0..n)).collect();
        targets.sort_unstable();
        targets.dedup();
        for j in targets {
            edges.push(((k(i), KeyedTarget::State(k(j))), rng.random_range(1..=max_count)));
        }
        let success = rng.random_range(0..=max_count);
        let failure = if success == 0 { rng.random_range(1..=max_count) } else { rng.random_range(0..=max_count) };
        for (label, c) in [(AbsorbingLabel::Success, success), (AbsorbingLabel::Failure, failure)] {
            if c > 0 {
                edges.push(((k(i), KeyedTarget::Absorbing(label)), c));
            }
        }
    }
    InterpretationGraph::from_edges(edges)
}

/// Layered DAG: edges only go from layer `l` to layer `l + 1`, so no path
/// is longer than `layers - 1` transitions.
pub fn layered_dag(rng: &mut ChaCha8Rng, layers: usize, width: usize) -> InterpretationGraph {
    let id = |l: usize, w: usize| l * width + w;
    let mut edges = Vec::new();
    for l in 0..layers {
        for w in 0..width {
            let src = k(id(l, w));
            if l + 1 < layers {
                let out = rng.random_range(1..=3usize.min(width));
                let mut targets: Vec<usize> = (0..out).map(|_| rng.random_range(0..width)).collect();
                targets.sort_unstable();
                targets.dedup();
                for t in targets {
                    edges.push(((src.clone(), KeyedTarget::State(k(id(l + 1, t)))), rng.random_range(1..=3)));
                }
            }
            edges.push(((src.clone(), KeyedTarget::Absorbing(AbsorbingLabel::Success)), rng.random_range(1..=3)));
            edges.push(((src, KeyedTarget::Absorbing(AbsorbingLabel::Failure)), rng.random_range(1..=3)));
        }
    }
    InterpretationGraph::from_edges(edges)
}

/// Dense random sub-stochastic matrix with row sums at most `max_row_sum`.
pub fn random_substochastic(rng: &mut ChaCha8Rng, n: usize, density: f64, max_row_sum: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < density { rng.random::<f64>() } else { 0.0 })
                .collect();
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                let target = rng.random::<f64>() * max_row_sum;
                row.iter_mut().for_each(|x| *x *= target / sum);
            }
            row
        })
        .collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal upper tail via composite Simpson quadrature of the
/// density on `[0, |z|]`.
pub fn normal_sf_quadrature(z: f64) -> f64 {
    let steps = 20_000;
    let a = z.abs();
    let h = a / steps as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = pdf(0.0) + pdf(a);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * pdf(i as f64 * h);
    }
    let area = acc * h / 3.0;
    if z >= 0.0 {
        0.5 - area
    } else {
        0.5 + area
    }
}

/// Pooled two-proportion statistic written out from the textbook formula.
pub fn pooled_z(x1: f64, n1: f64, x2: f64, n2: f64) -> f64 {
    let p = (x1 + x2) / (n1 + n2);
    let q = 1.0 - p;
    (x1 / n1 - x2 / n2) / (p * q / n1 + p * q / n2).sqrt()
}
