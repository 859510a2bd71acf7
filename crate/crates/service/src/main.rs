use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use cbac_core::cpdp::EngineKind;
use cbac_core::eaa::EaaKeyMaterial;
use cbac_core::ecdm::RelevanceModel;
use cbac_core::model::DataModel;
use cbac_core::synth::gen_model;
use cbac_service::{router, AppState, SystemClock};
use clap::Parser;

#[derive(Parser)]
#[command(name = "cbac-service", about = "Consent-based access control over HTTP")]
struct Cli {
    #[arg(long, env = "CBAC_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Dataset file; a generated 100-episode demo model when absent.
    #[arg(long, env = "CBAC_MODEL")]
    model: Option<PathBuf>,
    /// Relevance configuration; the built-in model when absent.
    #[arg(long, env = "CBAC_RELEVANCE")]
    relevance: Option<PathBuf>,
    /// File holding the base64 token signing key; a fresh key when absent.
    #[arg(long, env = "CBAC_KEYS")]
    keys: Option<PathBuf>,
    #[arg(long, env = "CBAC_ENGINE", default_value = "cbac")]
    engine: EngineKind,
}

fn read(path: &PathBuf) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load(cli: &Cli) -> Result<AppState, String> {
    let model = match &cli.model {
        Some(p) => DataModel::parse_dataset(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
        None => gen_model(100, 1),
    };
    let relevance = match &cli.relevance {
        Some(p) => RelevanceModel::parse(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
        None => RelevanceModel::default_model(),
    };
    let keys = match &cli.keys {
        Some(p) => EaaKeyMaterial::from_signing_base64(read(p)?.trim()).map_err(|e| format!("{}: {e}", p.display()))?,
        None => EaaKeyMaterial::generate(),
    };
    Ok(AppState::new(model, relevance, keys, cli.engine, Arc::new(SystemClock)))
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let state = match load(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cbac-service: {e}");
            return ExitCode::FAILURE;
        }
    };
    let listener = match tokio::net::TcpListener::bind(cli.listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("cbac-service: bind {}: {e}", cli.listen);
            return ExitCode::FAILURE;
        }
    };
    eprintln!("listening on {}", cli.listen);
    if let Err(e) = axum::serve(listener, router(Arc::new(state))).await {
        eprintln!("cbac-service: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
