use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use tsedit::guidance::GuidanceConfig;
use tsedit_service::{load_models, router, AppState, Cors};

/// Serve trained checkpoints to the time-series editor.
#[derive(Parser)]
#[command(name = "tsedit-serve", version)]
struct Args {
    /// Directory of `*.json` checkpoints; each file stem becomes an id.
    #[arg(long, env = "TSEDIT_MODELS", default_value = "models")]
    models: PathBuf,
    #[arg(long, env = "TSEDIT_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "TSEDIT_HOST", default_value = "127.0.0.1")]
    host: String,
    /// Allowed browser origin. Repeatable; any origin when omitted.
    #[arg(long = "origin", env = "TSEDIT_ORIGIN", value_delimiter = ',')]
    origins: Vec<String>,
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    let (models, failures) = match load_models(&args.models) {
        Ok(found) => found,
        Err(e) => {
            eprintln!("error: {}: {e}", args.models.display());
            std::process::exit(2);
        }
    };
    for (id, err) in &failures {
        eprintln!("skipping checkpoint `{id}`: {err}");
    }
    let cors = if args.origins.is_empty() {
        Cors::AnyOrigin
    } else {
        match args.origins.iter().map(|o| o.parse()).collect::<Result<Vec<_>, _>>() {
            Ok(list) => Cors::Origins(list),
            Err(e) => {
                eprintln!("error: bad origin: {e}");
                std::process::exit(1);
            }
        }
    };
    eprintln!("{} checkpoint(s) from {}", models.len(), args.models.display());
    let app = router(Arc::new(AppState::new(models, GuidanceConfig::default())), cors);
    let addr = format!("{}:{}", args.host, args.port);
    let listener = match tokio::net::TcpListener::bind(&addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: bind {addr}: {e}");
            std::process::exit(2);
        }
    };
    eprintln!("listening on http://{addr}");
    if let Err(e) = axum::serve(listener, app).await {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
