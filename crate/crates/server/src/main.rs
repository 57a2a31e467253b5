use std::net::SocketAddr;
use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use lcm_server::{AppState, EngineArgs};

#[derive(Debug, Parser)]
#[command(name = "lcm-server", version, about = "Serve the context engine over HTTP/JSON")]
struct Args {
    #[arg(long, env = "LCM_BIND", default_value = "127.0.0.1:7878")]
    bind: SocketAddr,
    #[command(flatten)]
    engine: EngineArgs,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let state = match AppState::from_args(&args.engine) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let listener = match tokio::net::TcpListener::bind(args.bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {}: {e}", args.bind);
            return ExitCode::from(1);
        }
    };
    tracing::info!(addr = %args.bind, store = %args.engine.store_path.display(), "listening");
    tokio::select! {
        r = lcm_server::serve(listener, state) => {
            if let Err(e) = r {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
    }
    ExitCode::SUCCESS
}
