use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Parser;
use log::{info, warn};
use reformulator::RewriteService;
use reformulator_cli::{init_logging, router, AppState, PORT_ENV};

#[derive(Parser)]
#[command(about = "Serve rewrite lookups over HTTP")]
struct Cli {
    #[arg(long)]
    table: PathBuf,
    #[arg(long, env = PORT_ENV, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Start with rewriting switched off (lookups pass through).
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    disabled: bool,
}

#[tokio::main]
async fn main() -> Result<()> {
    init_logging();
    let cli = Cli::parse();
    let service = RewriteService::new();
    // a missing or broken table at startup still serves pass-through
    if let Err(e) = service.reload(&cli.table) {
        warn!("starting without a table: {e}");
    }
    service.set_enabled(!cli.disabled);
    let state = Arc::new(AppState {
        service,
        table_path: cli.table,
    });
    let addr: SocketAddr = format!("{}:{}", cli.bind, cli.port)
        .parse()
        .with_context(|| format!("bad bind address {}:{}", cli.bind, cli.port))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot bind {addr}"))?;
    info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
