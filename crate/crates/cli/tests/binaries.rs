use std::path::Path;
use std::process::Command;

fn run(bin: &str, args: &[&str]) {
    let status = Command::new(bin).args(args).env("RUST_LOG", "warn").status().unwrap();
    assert!(status.success(), "{bin} {args:?} failed");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_pipeline_recovers_planted_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let (mine, sim) = (env!("CARGO_BIN_EXE_mine"), env!("CARGO_BIN_EXE_sim"));

    run(sim, &["preset", "planted", "--pairs", "2", "--population", "400", "--out", s(&p("world.toml"))]);
    run(sim, &["generate", "--spec", s(&p("world.toml")), "--seed", "3", "--out", s(&p("events.log"))]);
    run(mine, &["ingest", "--input", s(&p("events.log")), "--gap-ms", "45000", "--out", s(&p("sessions.jsonl"))]);
    run(
        mine,
        &[
            "build",
            "--sessions",
            s(&p("sessions.jsonl")),
            "--graph",
            s(&p("graph.tsv")),
            "--counts",
            s(&p("counts.tsv")),
            "--stats",
            s(&p("stats.tsv")),
        ],
    );
    run(mine, &["solve", "--graph", s(&p("graph.tsv")), "--method", "bfs", "--out", s(&p("vectors.tsv"))]);
    run(
        mine,
        &[
            "rewrite",
            "--vectors",
            s(&p("vectors.tsv")),
            "--counts",
            s(&p("counts.tsv")),
            "--stats",
            s(&p("stats.tsv")),
            "--mined-at",
            "5",
            "--out",
            s(&p("table.tsv")),
        ],
    );

    let table = reformulator::RewriteTable::read_tsv(std::fs::read(p("table.tsv")).unwrap().as_slice()).unwrap();
    let truth: reformulator::GroundTruth =
        serde_json::from_slice(&std::fs::read(p("events.log.truth.json")).unwrap()).unwrap();
    assert_eq!(table.len(), truth.pairs.len());
    for pair in &truth.pairs {
        assert_eq!(table.get(&pair.source).unwrap().target_utterance, pair.target);
    }

    run(mine, &["merge", "--tables", s(&p("table.tsv")), s(&p("table.tsv")), "--out", s(&p("merged.tsv"))]);
    let merged = reformulator::RewriteTable::read_tsv(std::fs::read(p("merged.tsv")).unwrap().as_slice()).unwrap();
    assert_eq!(merged.len(), table.len());

    let out = Command::new(sim)
        .args([
            "evaluate",
            "--events",
            s(&p("events.log")),
            "--table",
            s(&p("table.tsv")),
            "--spec",
            s(&p("world.toml")),
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(eval["replay_defect_rate"].as_f64().unwrap() < eval["baseline_defect_rate"].as_f64().unwrap());
}

#[test]
fn evaluate_without_spec_rejects_table() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.log");
    let table = dir.path().join("table.tsv");
    std::fs::write(&log, "").unwrap();
    std::fs::write(&table, reformulator::RewriteTable::default().to_bytes()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_sim"))
        .args(["evaluate", "--events", s(&log), "--table", s(&table)])
        .env("RUST_LOG", "off")
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(!status.success());
}
