//! `weightstash`: attacker- and defender-side workflows over volumes,
//! codes and weight containers.
//!
//! Attacker side: `phantom`, `encode`, `decode`, `zipvol`, `embed`,
//! `extract`, `plan`, `simulate`. Defender side: `carrier`, `scan`,
//! `metrics`. Every subcommand is deterministic given its inputs and
//! seeds; `--json` switches stdout to machine-readable reports.
//!
//! Exit codes follow sysexits: 64 usage, 65 bad data, 74 I/O. `scan`
//! exits 0/1/2 for clean/suspicious/flagged.

mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub const EX_USAGE: u8 = 64;
pub const EX_DATAERR: u8 = 65;
pub const EX_IOERR: u8 = 74;

/// Flag misuse detected after clap parsing; maps to exit 64.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "weightstash", version, about = "Hide, recover and detect payloads in model weight containers")]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Cap for internally parallel sections.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic volume and its mask.
    Phantom(commands::PhantomArgs),
    /// Lossy-encode a volume into a code file.
    Encode(commands::EncodeArgs),
    /// Decode a code file back into a volume.
    Decode(commands::DecodeArgs),
    /// Losslessly compress a volume into a ZIP archive.
    Zipvol(commands::ZipvolArgs),
    /// Fabricate a benign synthetic checkpoint (and its manifest).
    Carrier(commands::CarrierArgs),
    /// Hide a payload file inside a checkpoint.
    Embed(commands::EmbedArgs),
    /// Recover a hidden payload from a checkpoint.
    Extract(commands::ExtractArgs),
    /// Audit a checkpoint for hidden payloads.
    Scan(commands::ScanArgs),
    /// Export-budget planning over attack strategies.
    Plan(commands::PlanArgs),
    /// Simulate federated-learning exfiltration rounds.
    Simulate(commands::SimulateArgs),
    /// Fidelity and segmentation metrics between volumes and/or masks.
    Metrics(commands::MetricsArgs),
}

fn classify(err: &anyhow::Error) -> ExitCode {
    if err.downcast_ref::<UsageError>().is_some() {
        return ExitCode::from(EX_USAGE);
    }
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ExitCode::from(EX_IOERR);
        }
    }
    ExitCode::from(EX_DATAERR)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EX_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        // Ignore failure: the global pool can only be set once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let json = cli.json;
    let result = match cli.command {
        Command::Phantom(args) => commands::phantom(args, json),
        Command::Encode(args) => commands::encode(args, json),
        Command::Decode(args) => commands::decode(args, json),
        Command::Zipvol(args) => commands::zipvol(args, json),
        Command::Carrier(args) => commands::carrier(args, json),
        Command::Embed(args) => commands::embed(args, json),
        Command::Extract(args) => commands::extract(args, json),
        Command::Scan(args) => commands::scan(args, json),
        Command::Plan(args) => commands::plan(args, json),
        Command::Simulate(args) => commands::simulate(args, json),
        Command::Metrics(args) => commands::metrics(args, json),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify(&err)
        }
    }
}
