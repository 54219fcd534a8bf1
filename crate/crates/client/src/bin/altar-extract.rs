use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use altar_client::extractor::{export_bundle, export_runs, parse_optional_filter, verify_bundle, ExportFormat, ExtractError};
use altar_client::ApiClient;

/// Query, export and bundle runs from an Altar service.
#[derive(Debug, Parser)]
#[command(name = "altar-extract", version)]
struct Args {
    /// Service base URL.
    #[arg(long, global = true, env = "ALTAR_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Bearer token for the API.
    #[arg(long, global = true, env = "ALTAR_TOKEN")]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export matching runs as JSON lines or CSV.
    Query {
        /// Filter such as `experiment.name = "get_movie" and config.gain > 5`; empty selects all.
        filter: String,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a checksummed bundle of matching runs.
    Bundle {
        filter: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-hash a bundle against its manifest.
    Verify { dir: PathBuf },
}

fn io_error(path: PathBuf) -> impl FnOnce(io::Error) -> ExtractError {
    move |source| ExtractError::Io { path, source }
}

fn run(args: Args) -> Result<(), ExtractError> {
    match args.command {
        Command::Query { filter, format, out } => {
            let filter = parse_optional_filter(&filter)?;
            let client = ApiClient::new(&args.server, args.token)?;
            let format = match format {
                Format::Jsonl => ExportFormat::Jsonl,
                Format::Csv => ExportFormat::Csv,
            };
            let count = match out {
                Some(path) => {
                    let file = File::create(&path).map_err(io_error(path.clone()))?;
                    let mut writer = BufWriter::new(file);
                    let count = export_runs(&client, filter.as_ref(), format, &mut writer)?;
                    writer.flush().map_err(io_error(path))?;
                    count
                }
                None => {
                    let mut stdout = io::stdout().lock();
                    let count = export_runs(&client, filter.as_ref(), format, &mut stdout)?;
                    stdout.flush().map_err(io_error("<stdout>".into()))?;
                    count
                }
            };
            eprintln!("{count} runs");
        }
        Command::Bundle { filter, out } => {
            let client = ApiClient::new(&args.server, args.token)?;
            let summary = export_bundle(&client, &filter, &out)?;
            println!(
                "bundle of {} runs, {} files, manifest {}",
                summary.run_count,
                summary.file_count,
                summary.manifest_path.display()
            );
        }
        Command::Verify { dir } => {
            let manifest = verify_bundle(&dir)?;
            println!("ok: {} files verified", manifest.files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("altar-extract: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
