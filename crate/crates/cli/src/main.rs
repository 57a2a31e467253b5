use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use lcm_cli::{connect, dispatch, Cli};

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    // Usage errors exit with 2 from inside clap.
    let cli = Cli::parse();
    let result = match connect(&cli).await {
        Ok(client) => dispatch(&cli, &client).await,
        Err(e) => Err(e),
    };
    match result {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
