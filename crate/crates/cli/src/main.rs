use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rlvio::eval::AlignMode;
use rlvio_cli::commands::{self, Study, TrainTarget};
use rlvio_cli::config::RunConfig;
use rlvio_cli::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "rlvio", version, about = "Decoupled VIO with learned VO scheduling and fusion")]
struct Cli {
    /// TOML configuration file layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set select_reward.b=0.01`.
    /// Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise EuRoC-layout logs.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write a corpus of this many random-trajectory logs instead of
        /// the single configured log.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the bias networks, the fusion policy or the VO scheduler.
    Train {
        #[arg(value_enum)]
        target: TrainTarget,
    },
    /// Initialise and run the closed loop on one log.
    Run {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write wall time to timing.json.
        #[arg(long)]
        timing: bool,
    },
    /// ATE of a trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "se3")]
        mode: AlignMode,
        /// Timestamp association tolerance (s).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate an ablation table on held-out logs.
    Ablate {
        #[arg(value_enum)]
        study: Study,
        /// Directory of held-out logs; a synthetic test corpus otherwise.
        #[arg(long)]
        logs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let outputs = |sub: &str, o: Option<PathBuf>| o.unwrap_or_else(|| cfg.paths.outputs.join(sub));
    match cli.command {
        Command::Simulate { out, count } => {
            let out = outputs("simulate", out);
            commands::simulate(&cfg, &out, count)?;
            println!("wrote {}", out.display());
        }
        Command::Train { target } => {
            commands::train(&cfg, target)?;
            println!("wrote checkpoints to {}", cfg.paths.checkpoints.display());
        }
        Command::Run { log, out, timing } => {
            let out = outputs("run", out);
            let (_, s) = commands::run(&cfg, &log, &out, timing)?;
            let ate = s.ate_se3.map(|a| format!(", ate {a:.4}")).unwrap_or_default();
            println!("n_f {}, skip ratio {:.3}, scale {:.4}{ate}", s.n_f, s.skip_ratio, s.scale);
        }
        Command::Eval { est, gt, mode, tol, out } => {
            let out = outputs("eval", out);
            let (_, r) = commands::eval(&cfg, &est, &gt, mode, tol, &out)?;
            println!(
                "{} ate {:.6}, scale {:.6}, matched {}, unmatched {}",
                r.mode, r.ate_rmse, r.scale, r.matched, r.unmatched
            );
        }
        Command::Ablate { study, logs, out } => {
            let out = outputs("ablate", out);
            let (_, rows) = commands::ablate(&cfg, study, logs.as_deref(), &out)?;
            for r in rows {
                println!("{:<14} ate {:.4}  skip {:.3}  n_f {}", r.variant, r.ate, r.skip_ratio, r.n_f);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &CliError) -> u8 {
    e.exit_code() as u8
}
