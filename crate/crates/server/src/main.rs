use std::process::ExitCode;

use clap::Parser;
use medcode_server::cli::{run, Cli};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.chain().any(|c| c.is::<std::io::Error>()) { "io" } else { "data" };
            let line = serde_json::json!({"error": {"kind": kind, "message": message(&e)}});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
