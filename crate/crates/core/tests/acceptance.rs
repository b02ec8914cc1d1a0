//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use reformulator::ingest::{build_sessions, ingest};
use reformulator::interpretation::project;
use reformulator::markov_graph::{SparseMatrix, Target};
use reformulator::pipeline::{mine, MineConfig};
use reformulator::rewrite_miner::{blacklist_filter, two_proportion_z_test};
use reformulator::simulator::{self, presets};
use reformulator::solver::{best_target, fundamental_matrix, monte_carlo_success, solve_exact, success_vector_bfs};
use reformulator::{
    BestTarget, Decision, FrictionStats, IngestConfig, InterpretationGraph, Provenance,
    RewriteCandidate, RewriteService, RewriteTable, SolveConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.2?}, limit {limit:?}"))
    }
}

fn fixture() -> Outcome {
    let started = Instant::now();
    let (sessions, _) = ingest(EXAMPLE_LOG.as_bytes(), &IngestConfig::default()).map_err(|e| e.to_string())?;
    let g = InterpretationGraph::build(&project(&sessions).sessions);
    let h0 = g.id(&key(H0)).ok_or("h0 missing")?;
    let h1 = g.id(&key(H1)).ok_or("h1 missing")?;
    let z0 = g.row_total(h0);
    let p01 = g.transition_prob(h0, Target::State(h1)).map_err(|e| e.to_string())?;
    ensure!(z0 == 4, "Z0 = {z0}");
    ensure!(p01 == 0.25, "P(h1|h0) = {p01}");
    let v = solve_exact(&g, h0).map_err(|e| e.to_string())?;
    let BestTarget::Rewrite { target, phi } = best_target(&v) else {
        return Err("no rewrite for h0".into());
    };
    ensure!(target == key(H2), "best target {target}");
    ensure!((phi - 2.0 / 3.0).abs() < 1e-9, "phi = {phi}");
    within(started.elapsed(), Duration::from_secs(1))?;
    Ok(format!("Z0 = 4, P(h1|h0) = 0.25, best h2 with phi = {phi:.12}"))
}

fn fundamental() -> Outcome {
    let started = Instant::now();
    let mut rng = seeded(2);
    let (mut worst_inv, mut worst_series) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rand::Rng::random_range(&mut rng, 1..=50usize);
        let q = random_substochastic(&mut rng, n, 0.3, 0.75);
        let big_n = fundamental_matrix(&SparseMatrix::from_dense(&q)).map_err(|e| e.to_string())?;
        // (I - Q) N - I
        for i in 0..n {
            for j in 0..n {
                let mut acc = big_n[(i, j)];
                for (k, qik) in q[i].iter().enumerate() {
                    acc -= qik * big_n[(k, j)];
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                worst_inv = worst_inv.max((acc - expected).abs());
            }
        }
        // sum of Q^n for n <= 64
        let mut power: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let mut series = power.clone();
        for _ in 1..=64 {
            let mut next = vec![vec![0.0; n]; n];
            for i in 0..n {
                for (k, pik) in power[i].iter().enumerate() {
                    if *pik != 0.0 {
                        for j in 0..n {
                            next[i][j] += pik * q[k][j];
                        }
                    }
                }
            }
            power = next;
            for i in 0..n {
                for j in 0..n {
                    series[i][j] += power[i][j];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                worst_series = worst_series.max((series[i][j] - big_n[(i, j)]).abs());
            }
        }
    }
    ensure!(worst_inv < 1e-9, "max |(I-Q)N - I| = {worst_inv:e}");
    ensure!(worst_series < 1e-6, "max |N - series| = {worst_series:e}");
    within(started.elapsed(), Duration::from_secs(30))?;
    Ok(format!("200 chains, max |(I-Q)N-I| = {worst_inv:.2e}, max |N-series| = {worst_series:.2e}"))
}

fn monte_carlo() -> Outcome {
    let started = Instant::now();
    let walks = 100_000u64;
    let mut rng = seeded(3);
    let (mut compared, mut worst) = (0usize, 0.0f64);
    let mut misses = Vec::new();
    for graph_index in 0..20 {
        let n = rand::Rng::random_range(&mut rng, 3..=8usize);
        let g = random_graph(&mut rng, n, 3, 6);
        let source = reformulator::StateId(0);
        let exact = solve_exact(&g, source).map_err(|e| e.to_string())?;
        let est = monte_carlo_success(&g, source, walks, 1000 + graph_index);
        ensure!(est.unabsorbed == 0, "graph {graph_index}: {} walks never absorbed", est.unabsorbed);
        for id in g.state_ids() {
            let phi = exact.entries.get(g.key(id)).copied().unwrap_or(0.0);
            let p_hat = est.entries.get(&id).copied().unwrap_or(0.0);
            let sigma = (phi * (1.0 - phi) / walks as f64).sqrt();
            compared += 1;
            if sigma > 0.0 {
                worst = worst.max((p_hat - phi).abs() / sigma);
            }
            if (p_hat - phi).abs() > 3.0 * sigma {
                misses.push(format!("graph {graph_index} {}: exact {phi:.5} walks {p_hat:.5}", g.key(id)));
            }
        }
    }
    ensure!(misses.is_empty(), "{} of {compared} entries outside 3 sigma: {}", misses.len(), misses.join("; "));
    within(started.elapsed(), Duration::from_secs(60))?;
    Ok(format!("20 graphs, {compared} entries, worst deviation {worst:.2} sigma"))
}

fn bounded_search() -> Outcome {
    let started = Instant::now();
    let cfg = SolveConfig::default();
    let mut rng = seeded(4);
    let (mut cyclic_sources, mut worst_excess, mut truncated) = (0usize, f64::NEG_INFINITY, 0usize);
    for _ in 0..100 {
        let n = rand::Rng::random_range(&mut rng, 2..=60usize);
        let g = random_graph(&mut rng, n, 2, 5);
        for s in g.state_ids() {
            let exact = solve_exact(&g, s).map_err(|e| e.to_string())?;
            let approx = success_vector_bfs(&g, s, &cfg).map_err(|e| e.to_string())?;
            for (t, phi) in &approx.entries {
                let e = exact.entries.get(t).copied().unwrap_or(0.0);
                worst_excess = worst_excess.max(phi - e);
                ensure!(*phi <= e + 1e-9, "bfs {phi} > exact {e} for {} -> {t}", g.key(s));
            }
            truncated += exact
                .entries
                .iter()
                .filter(|(t, e)| approx.entries.get(*t).copied().unwrap_or(0.0) < *e - 1e-12)
                .count();
            cyclic_sources += 1;
        }
    }
    let (mut dag_sources, mut worst_gap) = (0usize, 0.0f64);
    for _ in 0..100 {
        let width = rand::Rng::random_range(&mut rng, 1..=6usize);
        let g = layered_dag(&mut rng, 6, width);
        for s in g.state_ids() {
            let exact = solve_exact(&g, s).map_err(|e| e.to_string())?;
            let approx = success_vector_bfs(&g, s, &cfg).map_err(|e| e.to_string())?;
            for (t, phi) in &exact.entries {
                let a = approx.entries.get(t).copied().unwrap_or(0.0);
                worst_gap = worst_gap.max((a - phi).abs());
            }
            for t in approx.entries.keys() {
                ensure!(exact.entries.contains_key(t), "bfs reached {t} but exact did not");
            }
            dag_sources += 1;
        }
    }
    ensure!(worst_gap <= 1e-9, "acyclic gap {worst_gap:e}");
    within(started.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "{cyclic_sources} cyclic sources (max bfs - exact = {worst_excess:.1e}, {truncated} entries strictly lower), {dag_sources} acyclic sources (max gap {worst_gap:.1e})"
    ))
}

fn z_test() -> Outcome {
    let mut stats = FrictionStats::new();
    stats.insert("play target", 30, 100);
    stats.insert("play source", 10, 100);
    stats.insert("play same a", 20, 100);
    stats.insert("play same b", 20, 100);
    let cand = |s: &str, t: &str| RewriteCandidate {
        source_utterance: s.into(),
        target_utterance: t.into(),
        score: 0.9,
        support: 100,
        mined_at: 0,
    };
    let (kept, report) = blacklist_filter(
        vec![
            cand("play source", "play target"),
            cand("play target", "play source"),
            cand("play same a", "play same b"),
        ],
        &stats,
        0.01,
    );
    ensure!(report[0].rejected, "worse rewrite arm not rejected: {:?}", report[0].test);
    ensure!(!report[1].rejected, "reversed candidate rejected");
    ensure!(!report[2].rejected, "equal arms rejected");
    ensure!(kept.len() == 2, "kept {}", kept.len());

    let cases = [
        (30, 100, 10, 100),
        (10, 100, 30, 100),
        (20, 100, 20, 100),
        (7, 40, 3, 55),
        (150, 1000, 120, 1000),
        (1, 10, 0, 10),
        (45, 60, 12, 80),
    ];
    let (mut worst_z, mut worst_p) = (0.0f64, 0.0f64);
    for (x1, n1, x2, n2) in cases {
        let t = two_proportion_z_test(x1, n1, x2, n2).ok_or("no test")?;
        let z = pooled_z(x1 as f64, n1 as f64, x2 as f64, n2 as f64);
        worst_z = worst_z.max((t.z - z).abs());
        worst_p = worst_p.max((t.p_value - normal_sf_quadrature(z)).abs());
    }
    ensure!(worst_z < 1e-6 && worst_p < 1e-6, "z error {worst_z:e}, p error {worst_p:e}");
    let t = report[0].test.ok_or("missing test")?;
    Ok(format!(
        "30/100 vs 10/100: z = {:.4}, p = {:.2e} rejected; oracle errors z {worst_z:.1e}, p {worst_p:.1e}",
        t.z, t.p_value
    ))
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let config = IngestConfig::default();
    let seed = 7;
    let spec = presets::planted_world(5, 2000);
    let (events, truth) = simulator::generate(&spec, seed).map_err(|e| e.to_string())?;
    let raw: Vec<_> = events.iter().map(|e| e.event.clone()).collect();
    let (sessions, _) = build_sessions(&raw, &config).map_err(|e| e.to_string())?;
    let mined = mine(&sessions, &MineConfig::default()).map_err(|e| e.to_string())?;
    ensure!(truth.pairs.len() == 5, "planted {} pairs", truth.pairs.len());
    for pair in &truth.pairs {
        let got = mined.table.get(&pair.source).ok_or(format!("`{}` not mined", pair.source))?;
        ensure!(got.target_utterance == pair.target, "`{}` -> `{}`", pair.source, got.target_utterance);
        let rejected = mined
            .blacklist
            .iter()
            .any(|d| d.source_utterance == pair.source && d.rejected);
        ensure!(!rejected, "planted pair `{}` blacklisted", pair.source);
    }
    let extra = mined.table.len() - truth.pairs.len();

    let no_harm = presets::no_harm_world(2000);
    let (nh_events, _) = simulator::generate(&no_harm, seed).map_err(|e| e.to_string())?;
    let nh_raw: Vec<_> = nh_events.into_iter().map(|e| e.event).collect();
    let (nh_sessions, _) = build_sessions(&nh_raw, &config).map_err(|e| e.to_string())?;
    let nh = mine(&nh_sessions, &MineConfig::default()).map_err(|e| e.to_string())?;
    ensure!(nh.table.is_empty(), "no-harm world produced {} rewrites", nh.table.len());

    let baseline = simulator::log_defect_rate(&events, &config).map_err(|e| e.to_string())?;
    let replayed = simulator::evaluate_defect_rate(&spec, seed, Some(&mined.table), &config).map_err(|e| e.to_string())?;
    let e0 = simulator::expected_defect_rate(&spec, None);
    let e1 = simulator::expected_defect_rate(&spec, Some(&mined.table));
    let n = spec.total_sessions() as f64;
    let (s0, s1) = ((e0 * (1.0 - e0) / n).sqrt(), (e1 * (1.0 - e1) / n).sqrt());
    let (observed, expected) = (baseline - replayed, e0 - e1);
    ensure!(replayed <= baseline, "defect rate rose from {baseline} to {replayed}");
    ensure!(
        (observed - expected).abs() <= 3.0 * (s0 + s1),
        "drop {observed:.4} vs expected {expected:.4} (3 sigma = {:.4})",
        3.0 * (s0 + s1)
    );
    within(started.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "5/5 pairs recovered ({extra} extra), no-harm table empty, defect rate {baseline:.4} -> {replayed:.4}, drop {observed:.4} vs expected {expected:.4} +- {:.4}",
        3.0 * (s0 + s1)
    ))
}

fn versioned_table(k: usize) -> RewriteTable {
    RewriteTable::from_candidates(
        [
            RewriteCandidate {
                source_utterance: "play babe shark".into(),
                target_utterance: format!("play baby shark {k}"),
                score: 0.5,
                support: k as u64 + 1,
                mined_at: k as u64,
            },
            RewriteCandidate {
                source_utterance: "play maj and dragons".into(),
                target_utterance: format!("play imagine dragons {k}"),
                score: 0.5,
                support: 1,
                mined_at: k as u64,
            },
        ],
        Provenance {
            config_hash: "accept".into(),
            corpus_id: format!("day-{k}"),
            mined_at: k as u64,
        },
    )
}

fn service() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let svc = Arc::new(RewriteService::new());

    // behaviour without a table, then hit, miss, disable, corrupt reload
    ensure!(svc.lookup_raw("play babe shark").decision == Decision::PassThrough, "no table should pass through");
    let first = dir.path().join("t0.tsv");
    std::fs::write(&first, versioned_table(0).to_bytes()).map_err(|e| e.to_string())?;
    let v0 = svc.reload(&first).map_err(|e| e.to_string())?;
    let hit = svc.lookup_raw("Play Babe  Shark");
    ensure!(
        matches!(&hit.decision, Decision::Rewrite { target, .. } if target == "play baby shark 0") && hit.table_version == v0,
        "hit returned {hit:?}"
    );
    ensure!(svc.lookup_raw("play jazz").decision == Decision::PassThrough, "miss rewrote");
    svc.set_enabled(false);
    ensure!(svc.lookup_raw("play babe shark").decision == Decision::PassThrough, "disabled service rewrote");
    svc.set_enabled(true);
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "play x\tplay y\tnot-a-score\n").map_err(|e| e.to_string())?;
    ensure!(svc.reload(&bad).is_err() && svc.version() == v0, "corrupt reload changed the table");

    // concurrent readers during 100 reloads
    let mut expected: BTreeMap<String, (String, String)> = BTreeMap::new();
    let mut paths = Vec::new();
    for k in 0..100 {
        let table = versioned_table(k);
        expected.insert(table.version(), (format!("play baby shark {k}"), format!("play imagine dragons {k}")));
        let path = dir.path().join(format!("t{k}.tsv"));
        std::fs::write(&path, table.to_bytes()).map_err(|e| e.to_string())?;
        paths.push(path);
    }
    let expected = Arc::new(expected);
    let done = Arc::new(AtomicBool::new(false));
    let (errors, mixed, total) = (Arc::new(AtomicU64::new(0)), Arc::new(AtomicU64::new(0)), Arc::new(AtomicU64::new(0)));
    let readers: Vec<_> = (0..8)
        .map(|r| {
            let (svc, expected, done) = (svc.clone(), expected.clone(), done.clone());
            let (errors, mixed, total) = (errors.clone(), mixed.clone(), total.clone());
            std::thread::spawn(move || {
                let queries = ["play babe shark", "play maj and dragons"];
                let mut i = r;
                while !done.load(Ordering::Acquire) || i < r + 1000 {
                    let q = queries[i % 2];
                    let resp = svc.lookup_raw(q);
                    total.fetch_add(1, Ordering::Relaxed);
                    i += 1;
                    if resp.warning.is_some() {
                        errors.fetch_add(1, Ordering::Relaxed);
                        continue;
                    }
                    let Some(want) = expected.get(&resp.table_version) else {
                        mixed.fetch_add(1, Ordering::Relaxed);
                        continue;
                    };
                    let want = if i % 2 == 1 { &want.0 } else { &want.1 };
                    match &resp.decision {
                        Decision::Rewrite { target, .. } if target == want => {}
                        _ => {
                            mixed.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
            })
        })
        .collect();
    let mut reload_errors = 0;
    for path in &paths {
        if svc.reload(path).is_err() {
            reload_errors += 1;
        }
        std::thread::sleep(Duration::from_micros(200));
    }
    done.store(true, Ordering::Release);
    for r in readers {
        r.join().map_err(|_| "reader panicked".to_string())?;
    }
    let (errors, mixed, total) = (errors.load(Ordering::Relaxed), mixed.load(Ordering::Relaxed), total.load(Ordering::Relaxed));
    ensure!(reload_errors == 0, "{reload_errors} reloads failed");
    ensure!(errors == 0 && mixed == 0, "{errors} errored and {mixed} mixed of {total} responses");
    ensure!(svc.version() == versioned_table(99).version(), "final version is not the last table");
    Ok(format!("8 readers, 100 reloads, {total} responses, 0 errored, 0 mixed"))
}

fn run(name: &str, f: fn() -> Outcome) -> bool {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = started.elapsed();
    match &result {
        Ok(detail) => println!("PASS  {name} ({elapsed:.2?}): {detail}"),
        Err(detail) => println!("FAIL  {name} ({elapsed:.2?}): {detail}"),
    }
    result.is_ok()
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("1 fixture reproduction", fixture),
        ("2 fundamental matrix", fundamental),
        ("3 monte carlo agreement", monte_carlo),
        ("4 bounded search soundness", bounded_search),
        ("5 blacklist z-test", z_test),
        ("6 end-to-end recovery", end_to_end),
        ("7 service contract", service),
    ];
    let failed = criteria.iter().filter(|(name, f)| !run(name, *f)).count();
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
