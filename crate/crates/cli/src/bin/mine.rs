use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use reformulator::ingest::{self, read_sessions, write_sessions};
use reformulator::interpretation::project;
use reformulator::pipeline::{self, MineConfig};
use reformulator::rewrite_miner::{
    blacklist_filter, lift_to_utterances, resolve_conflicts, sha256_hex, LiftConfig, DEFAULT_P_THRESHOLD,
    DEFAULT_TOP_K,
};
use reformulator::solver::{self, read_vectors, write_vectors};
use reformulator::{
    BipartiteCounts, FrictionStats, IngestConfig, InterpretationGraph, Provenance, RewriteTable, SolveConfig,
    SolveMethod, SuccessTable,
};
use reformulator_cli::{init_logging, open, write_file};

#[derive(Parser)]
#[command(about = "Mine query reformulations from session logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Exact,
    Bfs,
}

#[derive(clap::Args)]
struct IngestArgs {
    #[arg(long, default_value_t = ingest::DEFAULT_GAP_MS)]
    gap_ms: u64,
    #[arg(long, value_delimiter = ',', default_value = "StopIntent,CancelIntent")]
    interjections: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "unsupported,no-match,exception")]
    failure_categories: Vec<String>,
}

impl IngestArgs {
    fn config(&self) -> IngestConfig {
        IngestConfig {
            gap_ms: self.gap_ms,
            interjections: self.interjections.iter().cloned().collect(),
            failure_categories: self.failure_categories.iter().cloned().collect(),
        }
    }
}

#[derive(clap::Args)]
struct SolveArgs {
    #[arg(long, value_enum, default_value = "exact")]
    method: Method,
    #[arg(long, default_value_t = 5)]
    max_depth: usize,
    #[arg(long, default_value_t = 1e-6)]
    prune_epsilon: f64,
}

impl SolveArgs {
    fn config(&self) -> SolveConfig {
        SolveConfig {
            max_depth: self.max_depth,
            prune_epsilon: self.prune_epsilon,
            method: match self.method {
                Method::Exact => SolveMethod::Exact,
                Method::Bfs => SolveMethod::BoundedBfs,
            },
        }
    }
}

#[derive(clap::Args)]
struct LiftArgs {
    #[arg(long, default_value_t = DEFAULT_P_THRESHOLD)]
    p_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = 1)]
    min_support: u64,
    /// Timestamp recorded on every mined entry.
    #[arg(long, default_value_t = 0)]
    mined_at: u64,
    /// Utterances never proposed as rewrite targets.
    #[arg(long, value_delimiter = ',')]
    target_stoplist: Vec<String>,
}

impl LiftArgs {
    fn config(&self) -> LiftConfig {
        LiftConfig {
            top_k: self.top_k,
            min_support: self.min_support,
            mined_at: self.mined_at,
            target_stoplist: self.target_stoplist.iter().cloned().collect::<BTreeSet<_>>(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse an event log into labeled sessions (JSON lines).
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        ingest: IngestArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the interpretation graph, utterance counts and friction stats.
    Build {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_edge_count: u64,
        #[arg(long, default_value_t = 1)]
        min_pair_count: u64,
    },
    /// Compute success vectors for every state of a graph.
    Solve {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        solve: SolveArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift success vectors to an utterance rewrite table.
    Rewrite {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[command(flatten)]
        lift: LiftArgs,
        #[arg(long)]
        corpus_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// All steps from event log to rewrite table.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        ingest: IngestArgs,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        lift: LiftArgs,
        #[arg(long, default_value_t = 1)]
        min_edge_count: u64,
        #[arg(long, default_value_t = 1)]
        min_pair_count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge tables; per source the most recently mined entry wins.
    Merge {
        #[arg(long, num_args = 1.., required = true)]
        tables: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    init_logging();
    match Cli::parse().command {
        Command::Ingest { input, ingest, out } => {
            let (sessions, stats) = ingest::ingest(open(&input)?, &ingest.config())?;
            write_file(&out, |w| write_sessions(&sessions, w))?;
            info!(
                "{} events ({} malformed, {} duplicate timestamps) -> {} sessions ({} empty dropped)",
                stats.events,
                stats.malformed_lines,
                stats.duplicate_timestamps,
                stats.sessions,
                stats.discarded_empty
            );
        }
        Command::Build {
            sessions,
            graph,
            counts,
            stats,
            min_edge_count,
            min_pair_count,
        } => {
            let sessions = read_sessions(open(&sessions)?)?;
            let projection = project(&sessions);
            let g = InterpretationGraph::build_with_min_count(&projection.sessions, min_edge_count);
            let c = projection.counts.filtered(min_pair_count);
            let f = FrictionStats::from_sessions(&sessions);
            write_file(&graph, |w| g.write_tsv(w))?;
            write_file(&counts, |w| c.write_tsv(w))?;
            write_file(&stats, |w| f.write_tsv(w))?;
            info!(
                "{} sessions -> {} states, {} edges, {} unparsed events",
                sessions.len(),
                g.len(),
                g.total_edges(),
                projection.unparsed_events
            );
        }
        Command::Solve { graph, solve, out } => {
            let g = InterpretationGraph::read_tsv(open(&graph)?)?;
            let vectors = solver::solve_all(&g, &solve.config())?;
            let rewrites = vectors.iter().filter(|v| solver::best_target(v).is_rewrite()).count();
            write_file(&out, |w| write_vectors(&vectors, w))?;
            info!("{} vectors, {} with a better target", vectors.len(), rewrites);
        }
        Command::Rewrite {
            vectors,
            counts,
            stats,
            lift,
            corpus_id,
            out,
        } => {
            let table_in = SuccessTable::new(read_vectors(open(&vectors)?)?);
            let counts_bytes = std::fs::read(&counts).with_context(|| format!("cannot read {}", counts.display()))?;
            let c = BipartiteCounts::read_tsv(counts_bytes.as_slice())?;
            let f = FrictionStats::read_tsv(open(&stats)?)?;
            let config = MineConfig {
                lift: lift.config(),
                p_threshold: lift.p_threshold,
                ..MineConfig::default()
            };
            let candidates = lift_to_utterances(&table_in, &c, &config.lift);
            let (kept, report) = blacklist_filter(candidates, &f, config.p_threshold);
            for d in report.iter().filter(|d| d.rejected) {
                info!("blacklisted `{}` -> `{}`", d.source_utterance, d.target_utterance);
            }
            let table = RewriteTable::from_candidates(
                kept,
                Provenance {
                    config_hash: config.config_hash(),
                    corpus_id: corpus_id.unwrap_or_else(|| sha256_hex(&counts_bytes)[..16].to_string()),
                    mined_at: lift.mined_at,
                },
            );
            write_file(&out, |w| table.write_tsv(w))?;
            info!("{} rewrites, version {}", table.len(), table.version());
        }
        Command::Run {
            input,
            ingest,
            solve,
            lift,
            min_edge_count,
            min_pair_count,
            out,
        } => {
            let (sessions, stats) = ingest::ingest(open(&input)?, &ingest.config())?;
            let config = MineConfig {
                min_edge_count,
                min_pair_count,
                solve: solve.config(),
                lift: lift.config(),
                p_threshold: lift.p_threshold,
                corpus_id: pipeline::corpus_id(&sessions, &stats),
            };
            let mined = pipeline::mine(&sessions, &config)?;
            write_file(&out, |w| mined.table.write_tsv(w))?;
            info!("{} rewrites, version {}", mined.table.len(), mined.table.version());
        }
        Command::Merge { tables, out } => {
            let mut loaded = Vec::with_capacity(tables.len());
            for path in &tables {
                let table = RewriteTable::read_tsv(open(path)?).with_context(|| format!("in {}", path.display()))?;
                loaded.push(table);
            }
            if loaded.is_empty() {
                bail!("no tables to merge");
            }
            let merged = resolve_conflicts(&loaded);
            write_file(&out, |w| merged.write_tsv(w))?;
            info!("merged {} tables into {} rewrites", loaded.len(), merged.len());
        }
    }
    Ok(())
}
