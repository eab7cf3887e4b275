use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use nsm_core::dgp::{DgpConfig, SplitSpec};
use nsm_core::nn::DEFAULT_LEAKY_SLOPE;
use nsm_core::TrainConfig;
use serde::{Deserialize, Serialize};

/// Where the observations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Csv { csv: PathBuf },
    Dgp(DgpConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    NnLayer { layer: usize },
    NnPs,
    RawX,
    Random,
    LogRegPs,
    Pca { k: usize },
    PcaLogRegPs { k: usize },
    /// All controls with equal weight; reports imbalance only.
    NoMatching,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::NnLayer { layer } => format!("nn_layer{layer}"),
            Method::NnPs => "nn_ps".into(),
            Method::RawX => "raw_x".into(),
            Method::Random => "random".into(),
            Method::LogRegPs => "logreg_ps".into(),
            Method::Pca { k } => format!("pca{k}"),
            Method::PcaLogRegPs { k } => format!("pca{k}_logreg_ps"),
            Method::NoMatching => "no_matching".into(),
        }
    }

    pub fn is_propensity(&self) -> bool {
        matches!(self, Method::NnPs | Method::LogRegPs | Method::PcaLogRegPs { .. })
    }

    pub fn uses_network(&self) -> bool {
        matches!(self, Method::NnLayer { .. } | Method::NnPs)
    }
}

pub fn default_methods() -> Vec<Method> {
    vec![
        Method::NnLayer { layer: 1 },
        Method::NnPs,
        Method::RawX,
        Method::Random,
        Method::LogRegPs,
        Method::Pca { k: 5 },
        Method::PcaLogRegPs { k: 5 },
        Method::NoMatching,
    ]
}

fn default_hidden() -> Vec<usize> {
    vec![5, 100, 100]
}
fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}
fn default_patience() -> Option<usize> {
    Some(10)
}
fn default_neighbours() -> usize {
    1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Network shape between the covariates and the sigmoid head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            leaky_slope: default_slope(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DataSource,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Logistic-regression baselines; defaults to `train` without patience.
    #[serde(default)]
    pub logreg_train: Option<TrainConfig>,
    /// Early-stopping patience for the network, on the validation split.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "default_seeds")]
    pub dgp_seeds: Vec<u64>,
    #[serde(default = "default_seeds")]
    pub train_seeds: Vec<u64>,
    /// Neighbours per treated unit.
    #[serde(default = "default_neighbours")]
    pub k: usize,
    #[serde(default)]
    pub save_models: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(dgp: DataSource) -> Self {
        Self {
            dgp,
            methods: default_methods(),
            train: TrainConfig::default(),
            logreg_train: None,
            patience: default_patience(),
            architecture: Architecture::default(),
            split: SplitSpec::default(),
            dgp_seeds: default_seeds(),
            train_seeds: default_seeds(),
            k: default_neighbours(),
            save_models: false,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("at least one method is required");
        }
        if self.dgp_seeds.is_empty() || self.train_seeds.is_empty() {
            bail!("dgp_seeds and train_seeds each need at least one seed");
        }
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if self.architecture.hidden.is_empty() || self.architecture.hidden.contains(&0) {
            bail!("hidden widths must be non-empty and positive");
        }
        if let Some(p) = self.patience {
            if p == 0 {
                bail!("patience must be at least 1");
            }
        }
        for m in &self.methods {
            match *m {
                Method::NnLayer { layer } if layer == 0 || layer > self.architecture.hidden.len() + 1 => {
                    bail!(
                        "nn_layer {layer} outside 1..={}",
                        self.architecture.hidden.len() + 1
                    )
                }
                Method::Pca { k } | Method::PcaLogRegPs { k } if k == 0 => {
                    bail!("PCA needs k >= 1")
                }
                _ => {}
            }
        }
        self.train.validate()?;
        if let Some(t) = &self.logreg_train {
            t.validate()?;
        }
        if let DataSource::Dgp(d) = &self.dgp {
            d.validate()?;
        }
        Ok(())
    }

    pub fn logreg_config(&self) -> TrainConfig {
        let mut t = self.logreg_train.clone().unwrap_or_else(|| self.train.clone());
        t.early_stopping_patience = None;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"dgp": {"csv": "data.csv"}}"#).unwrap();
        assert_eq!(cfg.methods.len(), 8);
        assert_eq!(cfg.patience, Some(10));
        assert_eq!(cfg.architecture.hidden, vec![5, 100, 100]);
    }

    #[test]
    fn dgp_source_parses() {
        let text = r#"{"dgp": {"n": 100, "d_observed": 10, "d_latent": 2,
            "treated_fraction_target": 0.3,
            "propensity_form": {"kind": "logistic_on_projection"},
            "outcome_form": "linear", "effect_heterogeneity": 0.5,
            "noise_sd": 1.0, "overlap_clamp": 0.05, "seed": 0},
            "methods": [{"kind": "raw_x"}, {"kind": "pca", "k": 3}]}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert!(matches!(cfg.dgp, DataSource::Dgp(_)));
        assert_eq!(cfg.methods[1], Method::Pca { k: 3 });
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            r#"{"dgp": {"csv": "a"}, "methods": []}"#,
            r#"{"dgp": {"csv": "a"}, "dgp_seeds": []}"#,
            r#"{"dgp": {"csv": "a"}, "methods": [{"kind": "nn_layer", "layer": 9}]}"#,
            r#"{"dgp": {"csv": "a"}, "bogus": 1}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }
}
