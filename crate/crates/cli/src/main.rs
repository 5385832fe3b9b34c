//! `lrt`: run online-training experiments from TOML configs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lrt_core::harness::{self, ExperimentConfig, Outcome, Scenario};

#[derive(Parser)]
#[command(name = "lrt", version, about = "Low-rank training experiments for write-limited weight memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario named in the config.
    Run(RunArgs),
    /// Run the ablation grid.
    Ablate(RunArgs),
    /// Run the rank x weight-bitwidth sweep.
    Sweep(RunArgs),
    /// Run the linear-regression convergence lab.
    Convergence(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Use this single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shrink data sizes tenfold (`--desk-scale false` for full size).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    desk_scale: Option<bool>,
    /// Disable all quantization.
    #[arg(long)]
    float_mode: bool,
}

impl RunArgs {
    fn load(&self, forced: Option<Scenario>) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(s) = forced {
            cfg.scenario = s;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(d) = self.desk_scale {
            cfg.desk_scale = d;
        }
        cfg.float_mode |= self.float_mode;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt_pm(mean: f64, sd: f64) -> String {
    if sd.is_nan() {
        format!("{:.1}%", 100.0 * mean)
    } else {
        format!("{:.1}% ± {:.1}%", 100.0 * mean, 100.0 * sd)
    }
}

fn report(outcome: &Outcome, cfg: &ExperimentConfig) {
    match outcome {
        Outcome::Scenario(r) => {
            println!("scenario {}", r.scenario.name());
            for s in &r.summary {
                println!(
                    "  {:<12} accuracy(ema) {:<18} last-{} {:<18} max writes {:.0}",
                    s.scheme,
                    fmt_pm(s.accuracy_ema.0, s.accuracy_ema.1),
                    cfg.ablation.tail,
                    fmt_pm(s.tail_accuracy.0, s.tail_accuracy.1),
                    s.max_writes.0
                );
            }
        }
        Outcome::Ablation(rows) => {
            for r in rows {
                let (m, sd) = r.mean_sd();
                println!(
                    "  {:<8} {:<28} {:<8} {}",
                    r.group,
                    r.condition,
                    if r.maxnorm { "max-norm" } else { "no-norm" },
                    fmt_pm(m, sd)
                );
            }
        }
        Outcome::Sweep(s) => print!("{}", s.matrix_csv()),
        Outcome::Convergence(runs) => {
            for r in runs {
                println!(
                    "  {:<16} seed {:<3} loss {:.4e} -> {:.4e} (x{:.3e})",
                    r.name,
                    r.seed,
                    r.trajectory.initial_loss(),
                    r.trajectory.final_loss,
                    r.loss_ratio()
                );
            }
        }
    }
    println!("wrote results to {}", cfg.output.display());
}

fn execute(cli: Cli) -> Result<()> {
    let (args, forced) = match &cli.command {
        Command::Run(a) => (a, None),
        Command::Ablate(a) => (a, Some(Scenario::Ablation)),
        Command::Sweep(a) => (a, Some(Scenario::Sweep)),
        Command::Convergence(a) => (a, Some(Scenario::Convergence)),
    };
    let cfg = args.load(forced)?;
    let outcome = harness::run(&cfg)?;
    report(&outcome, &cfg);
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lrt: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
