use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use probssl::mi::{MineConfig, PairKind};
use probssl::ood::Detector;
use probssl_cli::commands::{self, exit_code, GridAxis, ProbeArgs, ProbeMode};

#[derive(Parser)]
#[command(name = "probssl", version, about = "Probabilistic-embedding SSL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file into a run directory.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Linear probe (frozen) or fine-tuning on a finished run.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        mode: ModeFlags,
        #[arg(long, default_value_t = 1.0)]
        label_fraction: f64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score IN test data against OUT splits with each detector.
    Ood {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated; defaults to every detector that applies.
        #[arg(long, value_delimiter = ',', value_parser = parse_detector)]
        detectors: Option<Vec<Detector>>,
        /// Data section (JSON) for an extra OUT split; repeatable. Without
        /// it the run's own OOD split is used.
        #[arg(long)]
        out_spec: Vec<PathBuf>,
    },
    /// MINE estimates between pairs of spaces.
    Mi {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "v:h,h:h',h:z,z:z'", value_parser = parse_pair)]
        pairs: Vec<PairKind>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Grid of runs over config keys and seeds, each pretrained and probed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// key=v1,v2,...; repeatable.
        #[arg(long, value_parser = parse_axis)]
        grid: Vec<GridAxis>,
        /// Number of seeds, run as 1..=N.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        probe_epochs: Option<usize>,
    },
    /// Aggregate run directories into CSV tables.
    Report {
        #[arg(required = false)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "csv")]
        emit: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct ModeFlags {
    #[arg(long)]
    freeze: bool,
    #[arg(long)]
    finetune: bool,
}

fn parse_detector(s: &str) -> Result<Detector, String> {
    commands::parse_detector(s).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> Result<PairKind, String> {
    PairKind::parse(s).map_err(|e| e.to_string())
}

fn parse_axis(s: &str) -> Result<GridAxis, String> {
    s.parse().map_err(|e: probssl::Error| e.to_string())
}

fn run(cli: Cli) -> probssl::Result<()> {
    match cli.command {
        Command::Pretrain { config, out, force } => {
            let s = commands::pretrain(&config, &out, force)?;
            match s.last {
                Some(r) => println!("{}: {} steps, final loss {:.6}", out.display(), s.steps, r.loss.total),
                None => println!("{}: no steps", out.display()),
            }
        }
        Command::Probe { run, mode, label_fraction, epochs } => {
            let mode = if mode.finetune { ProbeMode::Finetune } else { ProbeMode::Freeze };
            let s = commands::probe(&run, &ProbeArgs { mode, label_fraction, epochs })?;
            println!("{} ({} labelled samples): accuracy {:.4}", mode.name(), s.train_samples, s.result.accuracy);
        }
        Command::Ood { run, detectors, out_spec } => {
            for r in commands::ood(&run, detectors.as_deref(), &out_spec)? {
                let auroc = r.auroc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "N/A".into());
                println!("{:<8} {:<12} {auroc}", r.split, r.detector.name());
            }
        }
        Command::Mi { run, pairs, steps, hidden } => {
            let mut cfg = MineConfig::default();
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.hidden = hidden.unwrap_or(cfg.hidden);
            for r in commands::mi(&run, &pairs, &cfg)? {
                println!("{:<5} {:.4} nats", r.pair.label(), r.nats);
            }
        }
        Command::Ablate { config, grid, seeds, out, force, probe_epochs } => {
            let runs = commands::ablate(&config, &grid, &commands::seed_list(seeds), &out, force, probe_epochs)?;
            println!("{} runs; summary in {}", runs.len(), out.join("ablation_summary.csv").display());
        }
        Command::Report { runs, emit, out } => {
            for f in commands::report(&runs, &emit, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
