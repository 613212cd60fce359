use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use enki_bench::commands::{cmd_compare, cmd_run, cmd_sample_size, cmd_verify_bound};
use enki_bench::{BenchError, ExperimentConfig, Method};

#[derive(Parser, Debug)]
#[command(name = "enki", version, about = "Ensemble Kalman inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores). Use 1 for byte-reproducible output.
    #[arg(long, global = true, env = "ENKI_THREADS")]
    threads: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON config (schema "enki-config/1").
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one method and write history.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
    },
    /// Run several methods from one shared initial ensemble.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Methods to compare; repeat or separate with commas.
        #[arg(long, value_delimiter = ',')]
        method: Vec<String>,
    },
    /// Fit the finite-sample bound and check it against Monte Carlo trials.
    VerifyBound {
        #[command(flatten)]
        common: Common,
    },
    /// Ensemble size needed for a target accuracy and confidence.
    SampleSize {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, BenchError> {
    let mut bad = Vec::new();
    let methods = names
        .iter()
        .filter_map(|n| {
            let m = Method::parse(n.trim());
            if m.is_none() {
                bad.push(format!("method: unknown method \"{n}\""));
            }
            m
        })
        .collect();
    if bad.is_empty() {
        Ok(methods)
    } else {
        Err(BenchError::Config(bad))
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, BenchError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Run { common, method } => {
            let mut cfg = load(&common)?;
            if let Some(name) = method {
                cfg.method = parse_methods(&[name])?[0];
            }
            let s = cmd_run(&cfg, &common.out)?;
            println!(
                "{} on {}: {} iterations ({}), {} forward evaluations, loss {:.6e}",
                s.method.as_str(),
                s.problem,
                s.iterations,
                s.stop_reason,
                s.forward_evals,
                s.final_loss
            );
        }
        Command::Compare { common, method } => {
            let mut cfg = load(&common)?;
            if !method.is_empty() {
                cfg.methods = parse_methods(&method)?;
            }
            let methods = cfg.methods.clone();
            let s = cmd_compare(&cfg, &methods, &common.out)?;
            println!("{:<10} {:>10} {:>12} {:>14}", "method", "iterations", "G evals", "rel error");
            for r in &s.rows {
                let err = r.rel_error_vs_truth.map_or("-".to_string(), |e| format!("{e:.6e}"));
                println!("{:<10} {:>10} {:>12} {:>14}", r.method.as_str(), r.iterations, r.forward_evals, err);
            }
        }
        Command::VerifyBound { common } => {
            let cfg = load(&common)?;
            let s = cmd_verify_bound(&cfg, &common.out)?;
            println!(
                "bound holds: c = {:.6e}, c1 = {:.6e}, c2 = {:.6e}; worst margin {:.4} at N={}, eps={:e}",
                s.c, s.c1, s.c2, s.worst_cell.margin, s.worst_cell.n, s.worst_cell.eps
            );
        }
        Command::SampleSize { common } => {
            let cfg = load(&common)?;
            let s = cmd_sample_size(&cfg, Some(&common.out))?;
            print!("{}", s.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
