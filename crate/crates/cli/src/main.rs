use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edgequant::pipeline::{cmd_ablate, cmd_calibrate, cmd_cost, cmd_eval, cmd_export, cmd_pretrain, RunConfig};
use edgequant::Error;

#[derive(Parser)]
#[command(name = "edgequant", version, about = "Post-training quantization for small transformer models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// w8a8, w4a8, w4a8-sym, w8a16, full-w8a8 or w16a16.
    #[arg(long, global = true)]
    scheme: Option<String>,

    /// Calibration mode (blockwise, end2end), cost mode (prefill, decode)
    /// or evaluation modes (float,fakequant,int).
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Output path of the artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the toy float model.
    Pretrain,
    /// Learn scales, clipping and activation ranges.
    Calibrate,
    /// Compile the integer model file.
    Export,
    /// Perplexity, last-token accuracy and integer parity.
    Eval,
    /// Block-wise vs end-to-end grid.
    Ablate,
    /// Bit-weighted operation counts.
    Cost,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Calibrate => "calibrate",
            Command::Export => "export",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Cost => "cost",
        }
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(s) = &cli.scheme {
        cfg.scheme = s.parse()?;
    }
    if let Some(m) = &cli.mode {
        cfg = cfg.with_mode(cli.command.name(), m)?;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    match cli.command {
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Calibrate => cmd_calibrate(&cfg),
        Command::Export => cmd_export(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Cost => cmd_cost(&cfg),
    }
}

fn main() -> ExitCode {
    edgequant::tune_allocator();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("serializable report");
            // A closed pipe on stdout is not a failure of the command.
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
