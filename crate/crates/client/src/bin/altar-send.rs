use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use altar_client::sender::{ingest, scan_folder, IngestOutcome};
use altar_client::ApiClient;

/// Ingest a saved experiment folder as one run.
#[derive(Debug, Parser)]
#[command(name = "altar-send", version)]
struct Args {
    /// Folder to ingest.
    folder: PathBuf,
    /// Experiment name for the new run.
    #[arg(long)]
    name: String,
    /// Service base URL.
    #[arg(long, env = "ALTAR_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Bearer token for the API.
    #[arg(long, env = "ALTAR_TOKEN")]
    token: Option<String>,
    /// Print the ingest plan as JSON and exit without contacting the server.
    #[arg(long)]
    dry_run: bool,
}

fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let plan = scan_folder(&args.folder, &args.name)?;
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&plan)?);
        return Ok(());
    }
    let client = ApiClient::new(&args.server, args.token)?;
    match ingest(&plan, &client)? {
        IngestOutcome::Created { run_id } => println!("created run {run_id}"),
        IngestOutcome::Skipped { existing_run_id } => {
            println!("skipped: already ingested as run {existing_run_id}")
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("altar-send: {e}");
            ExitCode::FAILURE
        }
    }
}
