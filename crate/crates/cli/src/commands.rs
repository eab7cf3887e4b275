//! The `generate`, `train` and `bounds` subcommands.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nsm_core::bounds::{
    linear_bounds, multilayer_bounds, network_chain, sigmoid_domain_bound, BoundReport,
};
use nsm_core::data::Dataset;
use nsm_core::dgp::{self, DgpConfig, SplitSpec};
use nsm_core::linalg::Matrix;
use nsm_core::metrics::{discrepancy, wasserstein_exact_with_cap, DEFAULT_COST_CAP};
use nsm_core::nn::{self, Mlp, TrainConfig};
use nsm_core::{Discrepancy, EmpiricalPair};
use serde::{Deserialize, Serialize};

use crate::config::{Architecture, ExperimentConfig, DataSource};
use crate::experiment::network_for;

pub fn run_generate(config: &Path, seed: Option<u64>, out: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg: DgpConfig = serde_json::from_str(&text).context("parsing DGP config")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = dgp::generate(&cfg)?;
    fs::create_dir_all(out)?;
    nsm_core::save_csv(&ds, out.join("data.csv"))?;
    fs::write(out.join("dgp.json"), serde_json::to_string_pretty(&cfg)?)?;
    Ok(ds)
}

fn default_patience() -> Option<usize> {
    Some(10)
}

/// Settings of the `train` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    /// Only the train and validation parts are used.
    #[serde(default)]
    pub split: SplitSpec,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            architecture: Architecture::default(),
            patience: default_patience(),
            split: SplitSpec::default(),
        }
    }
}

/// Trains the propensity network on a CSV dataset; the seed drives initialisation and shuffling.
pub fn run_train(data: &Path, config: Option<&Path>, seed: u64, out: &Path) -> Result<nn::TrainOutcome> {
    let job: TrainJob = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).context("parsing train config")?,
        None => TrainJob::default(),
    };
    let ds = nsm_core::load_csv(data, Default::default())?;
    let (train, val, _) = dgp::split(&ds, &job.split)?;
    let mut exp = ExperimentConfig::new(DataSource::Csv { csv: data.to_path_buf() });
    exp.architecture = job.architecture.clone();
    let mut model = network_for(&exp, ds.dim())?;
    model.initialize(seed);
    let cfg = TrainConfig {
        rng_seed: seed,
        early_stopping_patience: job.patience,
        ..job.train.clone()
    };
    let outcome = nn::train(&model, &train, Some(&val), &cfg)?;
    fs::create_dir_all(out)?;
    nn::io::save(&outcome.model, out.join("model.json"))?;
    let mut hist = String::from("epoch,train_loss,val_loss\n");
    for r in &outcome.history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        hist.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, val));
    }
    fs::write(out.join("history.csv"), hist)?;
    Ok(outcome)
}

/// An affine score map read from JSON: `{"weights": [[..], ..], "bias": [..]}`.
#[derive(Debug, Clone, Deserialize)]
pub struct LinearMapFile {
    pub weights: Vec<Vec<f64>>,
    #[serde(default)]
    pub bias: Option<Vec<f64>>,
}

pub enum ScoreSource {
    Model(Mlp),
    Linear(Matrix),
}

impl ScoreSource {
    pub fn load_model(path: &Path) -> Result<Self> {
        Ok(ScoreSource::Model(nn::io::load(path)?))
    }

    pub fn load_linear(path: &Path) -> Result<Self> {
        let doc: LinearMapFile = serde_json::from_str(&fs::read_to_string(path)?)
            .context("parsing linear map")?;
        // biases cancel in every discrepancy, so only W is kept
        Ok(ScoreSource::Linear(Matrix::from_rows(&doc.weights)?))
    }
}

/// How the sigmoid input bound is chosen for multilayer constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmoidBound {
    /// Largest absolute pre-activation on the dataset.
    Auto,
    /// No bound: the global constant `m = 0` applies.
    None,
    Value(f64),
}

impl std::str::FromStr for SigmoidBound {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SigmoidBound::Auto),
            "none" => Ok(SigmoidBound::None),
            v => Ok(SigmoidBound::Value(v.parse().context("sigmoid bound must be auto, none or a number")?)),
        }
    }
}

fn measure(pair: &EmpiricalPair, metric: Discrepancy, cap: usize) -> Result<f64> {
    Ok(match metric {
        Discrepancy::Wass => wasserstein_exact_with_cap(pair, cap)?,
        Discrepancy::LinearMmd => discrepancy(pair, metric)?,
        Discrepancy::Tv => bail!("TV is only defined here for finite supports; use wass or mmd"),
    })
}

/// Score imbalance on the dataset and the covariate bounds it implies.
pub fn run_bounds(
    source: &ScoreSource,
    ds: &Dataset,
    layer: usize,
    metric: Discrepancy,
    sigmoid: SigmoidBound,
    cap: Option<usize>,
) -> Result<BoundReport> {
    let cap = cap.unwrap_or(DEFAULT_COST_CAP);
    let split = |m: &Matrix| {
        EmpiricalPair::new(
            m.select_rows(&ds.treated_indices()),
            m.select_rows(&ds.control_indices()),
        )
    };
    match source {
        ScoreSource::Linear(w) => {
            if layer != 1 {
                bail!("a linear map has a single layer");
            }
            let scores = ds.x.matmul(&w.transpose())?;
            let s = measure(&split(&scores)?, metric, cap)?;
            Ok(linear_bounds(w, s, metric)?)
        }
        ScoreSource::Model(model) => {
            let bound = match sigmoid {
                SigmoidBound::Auto => sigmoid_domain_bound(model, &ds.x, layer)?,
                SigmoidBound::None => None,
                SigmoidBound::Value(v) => Some(v),
            };
            let chain = network_chain(model, layer, bound)?;
            let scores = model.pre_activation_batch(&ds.x, layer)?;
            let s = measure(&split(&scores)?, metric, cap)?;
            Ok(multilayer_bounds(&chain, s, metric)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nsm_core::linalg;
    use nsm_core::nn::{ActivationKind, DenseLayer};

    fn data() -> Dataset {
        dgp::generate(&DgpConfig {
            n: 120,
            d_observed: 4,
            d_latent: 2,
            ..DgpConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn first_layer_matches_singular_values() {
        let ds = data();
        let mut m = nn::default_architecture(4).unwrap();
        m.initialize(2);
        let r = run_bounds(&ScoreSource::Model(m.clone()), &ds, 1, Discrepancy::LinearMmd, SigmoidBound::Auto, None).unwrap();
        let s = linalg::svd(&m.layers()[0].weights).unwrap().singular_values;
        let (max, min) = (s[0], *s.last().unwrap());
        assert!((r.lower - r.score_imbalance / max).abs() < 1e-12);
        assert!((r.upper - r.score_imbalance / min).abs() < 1e-9 * r.upper);
    }

    #[test]
    fn identity_map_is_tight() {
        let ds = data();
        let src = ScoreSource::Linear(Matrix::identity(4));
        for metric in [Discrepancy::LinearMmd, Discrepancy::Wass] {
            let r = run_bounds(&src, &ds, 1, metric, SigmoidBound::Auto, None).unwrap();
            let pair = EmpiricalPair::new(
                ds.x.select_rows(&ds.treated_indices()),
                ds.x.select_rows(&ds.control_indices()),
            )
            .unwrap();
            let truth = measure(&pair, metric, DEFAULT_COST_CAP).unwrap();
            assert!((r.lower - truth).abs() < 1e-12 && (r.upper - truth).abs() < 1e-12);
        }
    }

    #[test]
    fn unbounded_sigmoid_prints_inf() {
        let ds = data();
        let l1 = DenseLayer::new(Matrix::identity(4), vec![0.0; 4], ActivationKind::Sigmoid).unwrap();
        let l2 = DenseLayer::new(Matrix::from_rows(&[vec![1.0, -1.0, 0.5, 2.0]]).unwrap(), vec![0.0], ActivationKind::Sigmoid).unwrap();
        let m = Mlp::new(vec![l1, l2]).unwrap();
        let r = run_bounds(&ScoreSource::Model(m.clone()), &ds, 2, Discrepancy::Wass, SigmoidBound::None, None).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["upper"], "inf");
        assert_eq!(json["constants"]["beta"], "inf");
        let r = run_bounds(&ScoreSource::Model(m), &ds, 2, Discrepancy::Wass, SigmoidBound::Auto, None).unwrap();
        assert!(r.upper.is_finite());
    }

    #[test]
    fn wass_over_cap_is_rejected() {
        let ds = data();
        let err = run_bounds(&ScoreSource::Linear(Matrix::identity(4)), &ds, 1, Discrepancy::Wass, SigmoidBound::Auto, Some(10))
            .unwrap_err();
        assert!(err.to_string().contains("10"), "{err}");
    }

    #[test]
    fn generate_and_train_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DgpConfig { n: 200, d_observed: 5, d_latent: 2, ..DgpConfig::default() };
        let cfg_path = dir.path().join("dgp.json");
        fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let ds = run_generate(&cfg_path, Some(3), dir.path()).unwrap();
        let back = nsm_core::load_csv(dir.path().join("data.csv"), Default::default()).unwrap();
        assert_eq!(back, ds);
        let job = TrainJob {
            train: TrainConfig { max_epochs: 3, ..TrainConfig::default() },
            ..TrainJob::default()
        };
        let job_path = dir.path().join("train.json");
        fs::write(&job_path, serde_json::to_string(&job).unwrap()).unwrap();
        let out = run_train(&dir.path().join("data.csv"), Some(&job_path), 1, dir.path()).unwrap();
        let loaded = nn::io::load(dir.path().join("model.json")).unwrap();
        assert_eq!(loaded, out.model);
    }
}
