//! `ssa` command line: `train`, `eval` and `compare`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssa_lab::report::{run_compare, run_eval};
use ssa_lab::runner::train;
use ssa_lab::{EvalConfig, LabError, RunConfig};

#[derive(Parser)]
#[command(
    name = "ssa",
    version,
    about = "Train and analyze sparse/full dual-stream transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set alpha=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a step log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Only print the final line.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate one checkpoint (`checkpoint` key or positional path).
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: Option<PathBuf>,
    },
    /// Joint table over two or more checkpoints (`checkpoints` key or paths).
    Compare {
        #[command(flatten)]
        common: Common,
        checkpoints: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Train { common, quiet } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.sets)?;
            let every = (cfg.total_steps / 20).max(1);
            let out = train(&cfg, |l| {
                if !quiet && (l.step % every == 0 || l.step + 1 == cfg.total_steps) {
                    eprintln!(
                        "step {:>6} {:<6} ce {:.4} align {:.5} lr {:.2e}",
                        l.step, l.mode, l.ce, l.align, l.lr
                    );
                }
            })?;
            match &out.last {
                Some(l) => println!(
                    "final step {} ce {:.6} align {:.6} -> {}",
                    l.step,
                    l.ce,
                    l.align,
                    out.final_checkpoint.display()
                ),
                None => println!("no steps to run -> {}", out.final_checkpoint.display()),
            }
        }
        Command::Eval { common, checkpoint } => {
            let ev = EvalConfig::load(common.config.as_deref(), &common.sets)?;
            let path = checkpoint
                .or_else(|| ev.checkpoint.clone().map(PathBuf::from))
                .ok_or_else(|| {
                    LabError::Config(
                        "no checkpoint given (positional path or `checkpoint` key)".into(),
                    )
                })?;
            let out = run_eval(&ev, &path, &ev.out_root())?;
            for r in &out.report.rows {
                println!("{}", serde_json::to_string(r)?);
            }
            println!("wrote {}", out.csv.display());
        }
        Command::Compare {
            common,
            checkpoints,
        } => {
            let ev = EvalConfig::load(common.config.as_deref(), &common.sets)?;
            let paths = if checkpoints.is_empty() {
                ev.checkpoints.iter().map(PathBuf::from).collect()
            } else {
                checkpoints
            };
            let out = run_compare(&ev, &paths, &ev.out_root())?;
            for r in &out.report.rows {
                println!(
                    "{:<24} {:<6} ppl {:>8.4} sparsity {:.4} entropy {:.4} kl {:.6} sink {:.4}",
                    r.label, r.mode, r.ppl, r.sparsity, r.entropy, r.logit_kl, r.sink_mass
                );
            }
            println!("wrote {}", out.csv.display());
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
