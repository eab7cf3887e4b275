//! Multi-seed experiment: fit every method, match, and aggregate the metrics.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use nsm_core::data::Dataset;
use nsm_core::dgp::{self, SplitSpec};
use nsm_core::matching::{estimate_att, ground_truth_att, knn_match, random_match};
use nsm_core::metrics::{calibration_error, sample_imbalance};
use nsm_core::nn::{self, ActivationKind, Mlp};
use nsm_core::scores::{fit_logreg, fit_pca, fit_pca_logreg, ScoreProvider};
use nsm_core::MatchWeights;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Method};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CalibrationError,
    AttError,
    Imbalance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sample {
    InSample,
    HoldOut,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::CalibrationError => "calibration_error",
            Metric::AttError => "att_error",
            Metric::Imbalance => "imbalance",
        })
    }
}

impl fmt::Display for Sample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sample::InSample => "in_sample",
            Sample::HoldOut => "hold_out",
        })
    }
}

/// One metric value of one method in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dgp_seed: u64,
    pub train_seed: u64,
    pub method: String,
    pub sample: Sample,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub metric: Metric,
    pub sample: Sample,
    pub mean: f64,
    pub standard_error: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    pub dgp_seed: u64,
    pub train_seed: u64,
    pub model: Mlp,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub runs: Vec<RunRecord>,
    pub report: Vec<ReportRow>,
    pub notices: Vec<String>,
    pub networks: Vec<TrainedNetwork>,
}

struct RunOutput {
    records: Vec<RunRecord>,
    notices: Vec<String>,
    network: Option<TrainedNetwork>,
}

/// SplitMix64 finaliser, used to derive independent seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn load_dataset(cfg: &ExperimentConfig, cached: Option<&Dataset>, dgp_seed: u64) -> Result<Dataset> {
    match (&cfg.dgp, cached) {
        (_, Some(ds)) => Ok(ds.clone()),
        (DataSource::Dgp(d), None) => {
            let d = dgp::DgpConfig { seed: dgp_seed, ..d.clone() };
            Ok(dgp::generate(&d)?)
        }
        (DataSource::Csv { csv }, None) => Ok(nsm_core::load_csv(csv, Default::default())?),
    }
}

pub fn network_for(cfg: &ExperimentConfig, input_dim: usize) -> Result<Mlp> {
    let mut widths = vec![input_dim];
    widths.extend(&cfg.architecture.hidden);
    widths.push(1);
    let hidden = ActivationKind::LeakyRelu {
        slope: cfg.architecture.leaky_slope,
    };
    Ok(Mlp::zeros(&widths, hidden)?)
}

fn weights_for(
    method: Method,
    provider: Option<&ScoreProvider>,
    ds: &Dataset,
    k: usize,
    seed: u64,
) -> Result<MatchWeights> {
    Ok(match method {
        Method::NoMatching => MatchWeights::uniform_controls(&ds.t)?,
        Method::Random => random_match(&ds.treated_indices(), &ds.control_indices(), seed)?,
        _ => {
            let p = provider.ok_or_else(|| anyhow!("{} has no fitted scores", method.label()))?;
            knn_match(&p.score(&ds.x)?, &ds.t, k, true)?
        }
    })
}

fn run_one(
    cfg: &ExperimentConfig,
    cached: Option<&Dataset>,
    dgp_seed: u64,
    train_seed: u64,
) -> Result<RunOutput> {
    let ds = load_dataset(cfg, cached, dgp_seed)?;
    let spec = SplitSpec {
        ratios: cfg.split.ratios,
        seed: cfg.split.seed.wrapping_add(dgp_seed),
    };
    let (train, val, test) = dgp::split(&ds, &spec)?;
    let fit_set = train.concat(&val)?;
    let mut notices = Vec::new();

    let network = if cfg.methods.iter().any(|m| m.uses_network()) {
        let mut model = network_for(cfg, ds.dim())?;
        model.initialize(train_seed);
        let tc = nn::TrainConfig {
            rng_seed: train_seed,
            early_stopping_patience: cfg.patience,
            ..cfg.train.clone()
        };
        let out = nn::train(&model, &train, Some(&val), &tc)
            .with_context(|| format!("training network (dgp {dgp_seed}, train {train_seed})"))?;
        Some(TrainedNetwork {
            dgp_seed,
            train_seed,
            model: out.model,
            best_epoch: out.best_epoch,
        })
    } else {
        None
    };
    let logreg_cfg = nn::TrainConfig {
        rng_seed: train_seed,
        ..cfg.logreg_config()
    };

    let mut records = Vec::new();
    for &method in &cfg.methods {
        let provider = match method {
            Method::NnLayer { layer } => Some(ScoreProvider::nn_layer(
                network.as_ref().unwrap().model.clone(),
                layer,
            )?),
            Method::NnPs => Some(ScoreProvider::NnPs(network.as_ref().unwrap().model.clone())),
            Method::RawX => Some(ScoreProvider::RawX { dim: ds.dim() }),
            Method::LogRegPs => Some(fit_logreg(&fit_set.x, &fit_set.t, &logreg_cfg)?),
            Method::Pca { k } => Some(ScoreProvider::Pca(fit_pca(&fit_set.x, k)?)),
            Method::PcaLogRegPs { k } => Some(fit_pca_logreg(&fit_set.x, &fit_set.t, k, &logreg_cfg)?),
            Method::Random | Method::NoMatching => None,
        };
        let label = method.label();
        for (sample, set) in [(Sample::InSample, &fit_set), (Sample::HoldOut, &test)] {
            let mut push = |metric, value| {
                records.push(RunRecord {
                    dgp_seed,
                    train_seed,
                    method: label.clone(),
                    sample,
                    metric,
                    value,
                })
            };
            if method.is_propensity() {
                match &set.e_true {
                    Some(e) => {
                        let e_hat = provider.as_ref().unwrap().propensity(&set.x)?.unwrap();
                        push(Metric::CalibrationError, calibration_error(&e_hat, e)?);
                    }
                    None => notices.push(format!(
                        "{label}: no true propensity, calibration error skipped"
                    )),
                }
            }
            let seed = mix(mix(train_seed, dgp_seed), sample as u64);
            let w = weights_for(method, provider.as_ref(), set, cfg.k, seed)?;
            if method != Method::NoMatching {
                match ground_truth_att(set) {
                    Ok(truth) => push(Metric::AttError, (estimate_att(set, &w)? - truth).abs()),
                    Err(_) => notices.push(format!(
                        "{label}: no outcome means, ATT error skipped"
                    )),
                }
            }
            push(Metric::Imbalance, sample_imbalance(set, &w)?);
        }
    }
    Ok(RunOutput {
        records,
        notices,
        network,
    })
}

/// Runs every `(dgp_seed, train_seed)` pair; the result does not depend on `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cached = match &cfg.dgp {
        DataSource::Csv { .. } => Some(load_dataset(cfg, None, 0)?),
        DataSource::Dgp(_) => None,
    };
    let mut pairs: Vec<(u64, u64)> = Vec::new();
    for &d in &cfg.dgp_seeds {
        for &t in &cfg.train_seeds {
            pairs.push((d, t));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .context("building thread pool")?;
    let outputs: Vec<RunOutput> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(d, t)| run_one(cfg, cached.as_ref(), d, t))
            .collect::<Result<_>>()
    })?;

    let mut runs = Vec::new();
    let mut notices = Vec::new();
    let mut networks = Vec::new();
    for out in outputs {
        runs.extend(out.records);
        for n in out.notices {
            if !notices.contains(&n) {
                notices.push(n);
            }
        }
        networks.extend(out.network);
    }
    let report = aggregate(&runs, &cfg.methods);
    Ok(ExperimentOutput {
        runs,
        report,
        notices,
        networks,
    })
}

/// Mean and `sd / sqrt(n)` per `(method, metric, sample)`, in method order.
pub fn aggregate(runs: &[RunRecord], methods: &[Method]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for m in methods {
        let label = m.label();
        for metric in [Metric::CalibrationError, Metric::AttError, Metric::Imbalance] {
            for sample in [Sample::InSample, Sample::HoldOut] {
                let values: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.method == label && r.metric == metric && r.sample == sample)
                    .map(|r| r.value)
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let (mean, se) = mean_se(&values);
                rows.push(ReportRow {
                    method: label.clone(),
                    metric,
                    sample,
                    mean,
                    standard_error: se,
                    n_runs: values.len(),
                });
            }
        }
    }
    rows
}

/// Mean and standard error with the `n - 1` sample deviation; zero error for one value.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("method,metric,sample,mean,standard_error,n_runs\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.metric, r.sample, r.mean, r.standard_error, r.n_runs
        ));
    }
    s
}

pub fn runs_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("dgp_seed,train_seed,method,sample,metric,value\n");
    for r in runs {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.dgp_seed, r.train_seed, r.method, r.sample, r.metric, r.value
        ));
    }
    s
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    runs: usize,
    notices: &'a [String],
}

/// Writes `report.csv`, `report.json`, `runs.csv`, `manifest.json` and, if asked, the networks.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("report.csv"), report_csv(&out.report))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    fs::write(dir.join("runs.csv"), runs_csv(&out.runs))?;
    let manifest = Manifest {
        tool: "nsm",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        runs: out.runs.len(),
        notices: &out.notices,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if cfg.save_models {
        let models = dir.join("models");
        fs::create_dir_all(&models)?;
        for n in &out.networks {
            let path = models.join(format!("nn_dgp{}_train{}.json", n.dgp_seed, n.train_seed));
            nn::io::save(&n.model, &path)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSource;
    use nsm_core::dgp::DgpConfig;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(DataSource::Dgp(DgpConfig {
            n: 300,
            d_observed: 6,
            d_latent: 2,
            ..DgpConfig::default()
        }));
        cfg.train.max_epochs = 5;
        cfg.architecture.hidden = vec![3, 8];
        cfg.dgp_seeds = vec![1, 0];
        cfg.train_seeds = vec![0, 1];
        cfg
    }

    #[test]
    fn mean_se_matches_hand_values() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn report_shape_and_capabilities() {
        let cfg = tiny();
        let out = run_experiment(&cfg, Some(1)).unwrap();
        let has = |method: &str, metric| {
            out.report.iter().any(|r| r.method == method && r.metric == metric)
        };
        assert!(has("nn_ps", Metric::CalibrationError));
        assert!(!has("raw_x", Metric::CalibrationError));
        assert!(!has("no_matching", Metric::AttError));
        assert!(has("no_matching", Metric::Imbalance));
        assert!(out.report.iter().all(|r| r.n_runs == 4));
        // seed-sorted regardless of the listed order
        assert_eq!(out.runs[0].dgp_seed, 0);
        assert_eq!(out.networks.len(), 4);
    }

    #[test]
    fn output_independent_of_jobs() {
        let cfg = tiny();
        let a = run_experiment(&cfg, Some(1)).unwrap();
        let b = run_experiment(&cfg, Some(3)).unwrap();
        assert_eq!(report_csv(&a.report), report_csv(&b.report));
        assert_eq!(runs_csv(&a.runs), runs_csv(&b.runs));
    }

    #[test]
    fn aggregate_recomputes_from_runs() {
        let cfg = tiny();
        let out = run_experiment(&cfg, None).unwrap();
        let text = runs_csv(&out.runs);
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let parsed: Vec<RunRecord> = reader.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(aggregate(&parsed, &cfg.methods), out.report);
    }

    #[test]
    fn duplicated_controls_give_zero_error() {
        let ds = dgp::generate(&DgpConfig {
            n: 200,
            d_observed: 4,
            d_latent: 2,
            noise_sd: 0.0,
            ..DgpConfig::default()
        })
        .unwrap();
        let treated = ds.subset(&ds.treated_indices());
        let mut dup = treated.clone();
        dup.t = vec![false; dup.len()];
        dup.y = dup.mu0.clone().unwrap();
        let both = treated.concat(&dup).unwrap();
        let w = weights_for(Method::RawX, Some(&ScoreProvider::RawX { dim: 4 }), &both, 1, 0).unwrap();
        assert!((estimate_att(&both, &w).unwrap() - ground_truth_att(&both).unwrap()).abs() < 1e-12);
        assert!(sample_imbalance(&both, &w).unwrap() < 1e-24);
    }
}
