use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ditcache::harness::commands::{cmd_ablate, cmd_compare, cmd_l1curve, cmd_profile, cmd_run, load_config, Options};
use ditcache::Result;

#[derive(Parser)]
#[command(name = "ditcache", version, about = "Attention-profiled block caching on a toy diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dump per-step PGM frames.
    #[arg(long)]
    frames: bool,
    /// Record attention and block boundaries; writes cache state and trace files.
    #[arg(long)]
    trace: bool,
    /// Include wall-clock times in reports (outputs stop being reproducible).
    #[arg(long)]
    timing: bool,
}

impl Common {
    fn options(&self) -> Options {
        Options {
            out: self.out.clone(),
            frames: self.frames,
            trace: self.trace,
            timing: self.timing,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Profile every block and write heatmap.csv and partition.txt.
    Profile(Common),
    /// Reference and cached runs, compared in report.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// Use this partition file instead of profiling.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Pattern x schedule grid against one reference, written to ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Per-step L1 distance between consecutive noise predictions (l1.csv).
    L1curve(Common),
    /// Compare two latents saved by `run` (each with its .json sidecar).
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Profile(c) => {
            let p = cmd_profile(load_config(c.config.as_deref(), c.seed)?, &c.options())?;
            print!("{}", p.to_text());
        }
        Command::Run { common: c, partition } => {
            let cfg = load_config(c.config.as_deref(), c.seed)?;
            let report = cmd_run(cfg, partition.as_deref(), &c.options())?;
            print!("{}", report.to_json());
        }
        Command::Ablate { common: c, partition } => {
            let cfg = load_config(c.config.as_deref(), c.seed)?;
            let rows = cmd_ablate(cfg, partition.as_deref(), &c.options())?;
            println!("ablation.csv: {} rows", rows.len());
        }
        Command::L1curve(c) => {
            let curve = cmd_l1curve(load_config(c.config.as_deref(), c.seed)?, &c.options())?;
            println!("l1.csv: {} steps", curve.len());
        }
        Command::Compare {
            common: c,
            test,
            reference,
        } => {
            print!("{}", cmd_compare(&test, &reference, &c.options())?.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
