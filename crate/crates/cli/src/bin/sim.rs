use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use reformulator::ingest;
use reformulator::simulator::{self, presets, SimEvent};
use reformulator::{IngestConfig, RewriteTable, WorldSpec};
use reformulator_cli::{init_logging, open, write_file};
use serde::Serialize;

#[derive(Parser)]
#[command(about = "Simulate session logs with planted reformulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Planted,
    NoHarm,
}

#[derive(Subcommand)]
enum Command {
    /// Print a ready-made world spec.
    Preset {
        #[arg(value_enum)]
        kind: Preset,
        #[arg(long, default_value_t = 5)]
        pairs: usize,
        #[arg(long, default_value_t = 2000)]
        population: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an event log; ground truth goes to `<out>.truth.json`.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Defect rate of a log, and of a replay with a rewrite table applied.
    Evaluate {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        /// World and seed that produced the log; needed to replay.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Serialize)]
struct Evaluation {
    sessions: usize,
    baseline_defect_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    table_version: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replay_defect_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_with_table: Option<f64>,
}

fn load_spec(path: &PathBuf) -> Result<WorldSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    WorldSpec::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
}

fn main() -> Result<()> {
    init_logging();
    match Cli::parse().command {
        Command::Preset {
            kind,
            pairs,
            population,
            out,
        } => {
            let spec = match kind {
                Preset::Planted => presets::planted_world(pairs, population),
                Preset::NoHarm => presets::no_harm_world(population),
            };
            spec.validate()?;
            std::fs::write(&out, spec.to_toml_string()).with_context(|| format!("cannot write {}", out.display()))?;
        }
        Command::Generate { spec, seed, out } => {
            let world = load_spec(&spec)?;
            let (events, truth) = simulator::generate(&world, seed)?;
            write_file(&out, |w| simulator::write_log(&events, w))?;
            let mut truth_path = out.clone().into_os_string();
            truth_path.push(".truth.json");
            std::fs::write(&truth_path, serde_json::to_vec_pretty(&truth)?)?;
            info!("{} events from {} sessions", events.len(), world.total_sessions());
        }
        Command::Evaluate {
            events,
            table,
            spec,
            seed,
        } => {
            let config = IngestConfig::default();
            let (sessions, _) = ingest::ingest(open(&events)?, &config)?;
            let table = match &table {
                Some(path) => Some(RewriteTable::read_tsv(open(path)?).with_context(|| format!("in {}", path.display()))?),
                None => None,
            };
            let world = spec.as_ref().map(load_spec).transpose()?;
            let mut eval = Evaluation {
                sessions: sessions.len(),
                baseline_defect_rate: simulator::defect_rate(&sessions),
                table_version: table.as_ref().map(RewriteTable::version),
                replay_defect_rate: None,
                expected_baseline: None,
                expected_with_table: None,
            };
            match (&world, &table) {
                (Some(world), table) => {
                    let replayed: Vec<SimEvent> = simulator::replay(world, seed, table.as_ref())?;
                    eval.replay_defect_rate = Some(simulator::log_defect_rate(&replayed, &config)?);
                    eval.expected_baseline = Some(simulator::expected_defect_rate(world, None));
                    eval.expected_with_table = Some(simulator::expected_defect_rate(world, table.as_ref()));
                }
                (None, Some(_)) => bail!("replaying a table needs the --spec (and --seed) that produced the log"),
                (None, None) => {}
            }
            println!("{}", serde_json::to_string_pretty(&eval)?);
        }
    }
    Ok(())
}
