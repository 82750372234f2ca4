use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use feddq_cli::{cmd_bound, cmd_quantize, cmd_run, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "feddq", version, about = "Quantized federated averaging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every policy in an experiment config.
    Run {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Quantize a file of floats and write the encoded frame.
    Quantize {
        input: PathBuf,
        #[arg(long)]
        bits: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the convergence bound for a verification-mode run.
    Bound {
        rounds: PathBuf,
        #[arg(long)]
        constants: PathBuf,
        /// Defaults to bound_report.json next to the rounds file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = cmd_run(&cfg, out_dir.as_deref())?;
            for s in &outcome.summaries {
                let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.6}"));
                println!(
                    "{:<16} rounds={} train_loss={} eval={} paper_bits={} wire_bits={} rounds_to_target={}",
                    s.policy,
                    s.rounds_run,
                    fmt(s.final_train_loss),
                    fmt(s.final_eval_metric),
                    s.paper_bits_total,
                    s.wire_bits_total,
                    s.rounds_to_target.map_or_else(|| "-".to_owned(), |r| r.to_string()),
                );
            }
            println!("artifacts in {}", outcome.output_dir.display());
        }
        Command::Quantize { input, bits, seed, out } => {
            let s = cmd_quantize(&input, bits, seed, &out)?;
            println!("count={}", s.count);
            println!("range={} (min {} max {})", s.range, s.vmin, s.vmax);
            println!("bits={}", s.bit_width);
            println!("paper_bits={}", s.paper_bits);
            println!("wire_bits={}", s.wire_bits);
            println!("mse={:e}", s.mse);
        }
        Command::Bound { rounds, constants, out } => {
            let b = cmd_bound(&rounds, &constants, out.as_deref())?;
            let g = &b.generalized;
            println!("initial_gap_term={:e}", g.initial_gap_term);
            println!("range_term={:e}", g.range_term);
            println!("sigma_term={:e}", g.sigma_term);
            println!("drift_term={:e}", g.drift_term);
            println!("selection_terms={:e}", g.selection_sigma_term + g.selection_quant_term);
            println!("rhs={:e}", g.total);
            println!("measured_lhs={:e}", b.measured_lhs);
            println!("satisfied={}", b.satisfied);
            println!("stepsize_margin={:e}", b.stepsize.margin);
            if let Some(s) = b.optimal_level {
                println!("optimal_level={s:.3}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("feddq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
