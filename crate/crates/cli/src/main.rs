use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use promptfusion::harness::{expand_sweep, plot, report, resume, run_sweep, RunConfig, RunResults};

#[derive(Parser)]
#[command(version, about = "Continual learning with fused stabilizer and booster prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configuration in a file (one, or one per `[[variant]]`).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Runs executed at once when the file defines a sweep.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Continue a run from a per-task checkpoint directory.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must match the configuration the checkpoint was written with.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print tables from a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
    /// Render SVG plots from a results file.
    Plot {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to the results file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn summarize(name: &str, r: &RunResults) {
    let mut line = format!("{name}: A_T = {:.4}", r.average_accuracy);
    if let Some(f) = &r.forgetting {
        line += &format!(", mean forgetting = {:.4}", f.mean);
    }
    if let Some(rate) = r.activation_rate {
        line += &format!(", activation rate = {rate:.3}");
    }
    println!("{line}");
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, threads } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfgs = expand_sweep(&text)?;
            let names: Vec<String> = cfgs
                .iter()
                .enumerate()
                .map(|(i, c)| c.name.clone().unwrap_or_else(|| format!("run {i}")))
                .collect();
            let mut failed = 0;
            for (name, res) in names.iter().zip(run_sweep(cfgs, threads)) {
                match res {
                    Ok(r) => summarize(name, &r),
                    Err(e) => {
                        log::error!("{name}: {e}");
                        failed += 1;
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} run(s) failed");
            }
        }
        Command::Resume { checkpoint, config } => {
            let cfg = config.map(RunConfig::load).transpose()?;
            let r = resume(&checkpoint, cfg)?;
            summarize(&checkpoint.display().to_string(), &r);
        }
        Command::Report { results } => {
            print!("{}", report::report(&report::load_results(&results)?)?);
        }
        Command::Plot { results, out } => {
            let lines = report::load_results(&results)?;
            let dir = out.unwrap_or_else(|| results.parent().map(PathBuf::from).unwrap_or_default());
            std::fs::create_dir_all(&dir)?;
            plot::plot_results(&lines, &dir)?;
            println!("wrote plots to {}", dir.display());
        }
    }
    Ok(())
}
