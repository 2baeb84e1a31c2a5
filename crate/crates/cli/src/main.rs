use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metasgd_cli::config::parse_config;
use metasgd_cli::error::CliError;
use metasgd_cli::gradcheck::{op_name, run_all};
use metasgd_cli::output::write_file;
use metasgd_cli::run::{export_curve, run_eval, run_experiment, CURVE_POINTS};

#[derive(Parser)]
#[command(name = "metasgd", version, about = "Meta-SGD, MAML and LSTM meta-learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train per the config, then evaluate and write outputs.
    Train { config: PathBuf },
    /// Evaluate a saved checkpoint under the config's protocol.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference checks of every differentiable component.
    Gradcheck {
        /// Flip the sign of one op's backward pass to exercise the report.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Sine adaptation curve data: truth, pre- and post-adaptation predictions.
    ExportCurve {
        checkpoint: PathBuf,
        #[arg(long)]
        task_seed: u64,
        #[arg(long, default_value_t = CURVE_POINTS)]
        points: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => {
            let cfg = parse_config(&config)?;
            let out = run_experiment(&cfg)?;
            println!("trained {} iterations", out.trainer.iteration);
            for r in &out.eval {
                println!("{}: {} ± {}", r.setting, r.mean, r.ci95_half);
            }
            println!("wrote {}", out.train_log_path.display());
            println!("wrote {}", out.eval_path.display());
            println!("wrote {}", out.checkpoint_path.display());
        }
        Command::Eval { config, checkpoint } => {
            let cfg = parse_config(&config)?;
            let (rows, same) = run_eval(&cfg, &checkpoint)?;
            if !same {
                eprintln!("warning: checkpoint was trained under a different config");
            }
            for r in &rows {
                println!("{}: {} ± {}", r.setting, r.mean, r.ci95_half);
            }
        }
        Command::Gradcheck { inject_fault } => {
            let fault = inject_fault.as_deref().map(op_name).transpose()?;
            let report = run_all(fault);
            print!("{}", report.render());
            if !report.passed() {
                return Err(CliError::Numerical("gradient check failed".into()));
            }
        }
        Command::ExportCurve { checkpoint, task_seed, points, output } => {
            let csv = export_curve(&checkpoint, task_seed, points)?;
            match output {
                Some(path) => write_file(&path, &csv)?,
                None => std::io::stdout().write_all(&csv)?,
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
