use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nsm_cli::commands::{run_bounds, run_generate, run_train, ScoreSource, SigmoidBound};
use nsm_cli::config::ExperimentConfig;
use nsm_cli::experiment::{run_experiment, write_outputs};
use nsm_cli::oracle::{run_suite, Suite};
use nsm_core::Discrepancy;

#[derive(Parser)]
#[command(name = "nsm", version, about = "Neural score matching for ATT estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset from a DGP config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the propensity network on a CSV dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the multi-seed experiment and write the reports.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the DGP seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to one per core.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Imbalance bounds for a trained layer or a linear map.
    Bounds {
        #[arg(long, conflicts_with = "linear_map", required_unless_present = "linear_map")]
        model: Option<PathBuf>,
        #[arg(long)]
        linear_map: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        /// `wass` or `mmd`.
        #[arg(long, default_value = "wass")]
        metric: Discrepancy,
        /// `auto`, `none`, or a numeric bound on sigmoid inputs.
        #[arg(long, default_value = "auto")]
        sigmoid_bound: SigmoidBound,
        /// Largest transport problem, in cost entries.
        #[arg(long)]
        cost_cap: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run property suites against their exact oracles.
    OracleCheck {
        /// Suite name, or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Defaults to the suite's own trial count.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let ds = run_generate(&config, seed, &out)?;
            println!(
                "wrote {} rows ({} treated) to {}",
                ds.len(),
                ds.n_treated(),
                out.join("data.csv").display()
            );
        }
        Command::Train { data, config, out, seed } => {
            let o = run_train(&data, config.as_deref(), seed, &out)?;
            let last = o.history[o.best_epoch];
            println!(
                "best epoch {} of {}: train loss {}, val loss {}",
                o.best_epoch,
                o.history.len() - 1,
                last.train_loss,
                last.val_loss.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        Command::Evaluate { config, out, seed, jobs } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.dgp_seeds = vec![s];
            }
            let dir = match out.or_else(|| cfg.output_dir.clone()) {
                Some(d) => d,
                None => bail!("no output directory: pass --out or set output_dir"),
            };
            let result = run_experiment(&cfg, jobs)?;
            for n in &result.notices {
                eprintln!("notice: {n}");
            }
            write_outputs(&dir, &cfg, &result)?;
            for r in &result.report {
                println!(
                    "{:<18} {:<17} {:<9} {:.6} ± {:.6} (n={})",
                    r.method, r.metric, r.sample, r.mean, r.standard_error, r.n_runs
                );
            }
        }
        Command::Bounds {
            model,
            linear_map,
            data,
            layer,
            metric,
            sigmoid_bound,
            cost_cap,
            out,
        } => {
            let source = match (model, linear_map) {
                (Some(m), _) => ScoreSource::load_model(&m)?,
                (None, Some(l)) => ScoreSource::load_linear(&l)?,
                (None, None) => bail!("pass --model or --linear-map"),
            };
            let ds = nsm_core::load_csv(&data, Default::default())
                .with_context(|| format!("loading {}", data.display()))?;
            let report = run_bounds(&source, &ds, layer, metric, sigmoid_bound, cost_cap)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                std::fs::write(p, &json)?;
            }
            println!("{json}");
        }
        Command::OracleCheck { suite, trials, seed, out } => {
            let suites = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![suite.parse()?]
            };
            let mut reports = Vec::new();
            for s in suites {
                let r = run_suite(s, trials.unwrap_or(s.default_trials()), seed)?;
                println!("{r}");
                reports.push(r);
            }
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_string_pretty(&reports)?)?;
            }
            return Ok(reports.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
