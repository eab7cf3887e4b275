//! Score providers: the representations treated and control units are matched on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::data::Dataset;
use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{self, io::ModelDoc, Mlp, TrainConfig};

/// Which score a provider computes, before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreKind {
    RawX,
    Pca { k: usize },
    LogRegPs,
    /// Logistic regression on the PCA projection.
    PcaLogRegPs { k: usize },
    NnLayer { layer: usize },
    NnPs,
    Random { seed: u64 },
}

impl ScoreKind {
    pub fn is_propensity(&self) -> bool {
        matches!(
            self,
            ScoreKind::LogRegPs | ScoreKind::PcaLogRegPs { .. } | ScoreKind::NnPs
        )
    }

    pub fn label(&self) -> String {
        match self {
            ScoreKind::RawX => "raw_x".into(),
            ScoreKind::Pca { k } => format!("pca{k}"),
            ScoreKind::LogRegPs => "logreg_ps".into(),
            ScoreKind::PcaLogRegPs { k } => format!("pca{k}_logreg_ps"),
            ScoreKind::NnLayer { layer } => format!("nn_layer{layer}"),
            ScoreKind::NnPs => "nn_ps".into(),
            ScoreKind::Random { .. } => "random".into(),
        }
    }
}

/// Centred projection onto the top principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x D`, orthonormal rows.
    pub components: Matrix,
    pub requested_k: usize,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    /// Set when fewer components than requested were available.
    pub fn reduced(&self) -> bool {
        self.k() < self.requested_k
    }

    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(shape(format!(
                "PCA was fitted on {} covariates, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let centered = Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] - self.mean[c]);
        centered.matmul(&self.components.transpose())
    }

    /// `(W, b)` with `project(x) = W x + b`.
    pub fn affine(&self) -> (Matrix, Vec<f64>) {
        let w = self.components.clone();
        let b = w
            .matvec(&self.mean)
            .expect("mean matches components")
            .into_iter()
            .map(|v| -v)
            .collect();
        (w, b)
    }
}

/// Top-`k` right singular vectors of the column-centred data; `k` is cut to the numerical rank.
pub fn fit_pca(x: &Matrix, k: usize) -> Result<PcaModel> {
    if x.rows() < 2 {
        return Err(invalid("PCA needs at least two rows"));
    }
    if k == 0 {
        return Err(invalid("PCA needs k >= 1"));
    }
    let n = x.rows();
    let d = x.cols();
    let mean: Vec<f64> = (0..d)
        .map(|c| x.column(c).iter().sum::<f64>() / n as f64)
        .collect();
    let centered = Matrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
    let mut rows = Vec::new();
    if !centered.is_zero() {
        let svd = linalg::svd(&centered)?;
        let tol = linalg::default_rank_tol(n, d, svd.max());
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        for r in 0..k.min(rank) {
            let mut v = svd.v_t.row(r).to_vec();
            // fix the sign: largest-magnitude entry positive
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            rows.push(v);
        }
    }
    if rows.is_empty() {
        return Err(Error::Degenerate("all rows are identical".into()));
    }
    Ok(PcaModel {
        mean,
        components: Matrix::from_rows(&rows)?,
        requested_k: k,
    })
}

fn labelled(x: &Matrix, t: &[bool]) -> Result<Dataset> {
    Dataset::new(x.clone(), t.to_vec(), vec![0.0; x.rows()])
}

fn train_logreg(x: &Matrix, t: &[bool], cfg: &TrainConfig) -> Result<Mlp> {
    let model = nn::logistic_regression(x.cols())?;
    let cfg = TrainConfig {
        early_stopping_patience: None,
        ..cfg.clone()
    };
    Ok(nn::train(&model, &labelled(x, t)?, None, &cfg)?.model)
}

/// Affine score map `score(x) = W x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMapMeta {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreProvider {
    RawX { dim: usize },
    Pca(PcaModel),
    LogRegPs(Mlp),
    PcaLogRegPs { pca: PcaModel, model: Mlp },
    NnLayer { model: Mlp, layer: usize },
    NnPs(Mlp),
    Random { seed: u64 },
}

/// Single-layer sigmoid model trained by SGD; patience is ignored and all epochs run.
pub fn fit_logreg(x: &Matrix, t: &[bool], cfg: &TrainConfig) -> Result<ScoreProvider> {
    Ok(ScoreProvider::LogRegPs(train_logreg(x, t, cfg)?))
}

pub fn fit_pca_logreg(x: &Matrix, t: &[bool], k: usize, cfg: &TrainConfig) -> Result<ScoreProvider> {
    let pca = fit_pca(x, k)?;
    let model = train_logreg(&pca.project(x)?, t, cfg)?;
    Ok(ScoreProvider::PcaLogRegPs { pca, model })
}

impl ScoreProvider {
    pub fn nn_layer(model: Mlp, layer: usize) -> Result<Self> {
        if layer == 0 || layer > model.depth() {
            return Err(invalid(format!(
                "layer {layer} outside 1..={}",
                model.depth()
            )));
        }
        Ok(ScoreProvider::NnLayer { model, layer })
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            ScoreProvider::RawX { .. } => ScoreKind::RawX,
            ScoreProvider::Pca(p) => ScoreKind::Pca { k: p.requested_k },
            ScoreProvider::LogRegPs(_) => ScoreKind::LogRegPs,
            ScoreProvider::PcaLogRegPs { pca, .. } => ScoreKind::PcaLogRegPs {
                k: pca.requested_k,
            },
            ScoreProvider::NnLayer { layer, .. } => ScoreKind::NnLayer { layer: *layer },
            ScoreProvider::NnPs(_) => ScoreKind::NnPs,
            ScoreProvider::Random { seed } => ScoreKind::Random { seed: *seed },
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            ScoreProvider::RawX { dim } => Some(*dim),
            ScoreProvider::Pca(p) | ScoreProvider::PcaLogRegPs { pca: p, .. } => Some(p.mean.len()),
            ScoreProvider::LogRegPs(m) | ScoreProvider::NnPs(m) => Some(m.input_dim()),
            ScoreProvider::NnLayer { model, .. } => Some(model.input_dim()),
            ScoreProvider::Random { .. } => None,
        }
    }

    pub fn score_dim(&self) -> usize {
        match self {
            ScoreProvider::RawX { dim } => *dim,
            ScoreProvider::Pca(p) => p.k(),
            ScoreProvider::NnLayer { model, layer } => model.layers()[layer - 1].out_dim(),
            _ => 1,
        }
    }

    /// One score row per covariate row.
    pub fn score(&self, x: &Matrix) -> Result<Matrix> {
        if let Some(d) = self.input_dim() {
            if x.cols() != d {
                return Err(shape(format!(
                    "score provider expects {d} covariates, got {}",
                    x.cols()
                )));
            }
        }
        let column = |v: Vec<f64>| Matrix::new(v.len(), 1, v);
        match self {
            ScoreProvider::RawX { .. } => Ok(x.clone()),
            ScoreProvider::Pca(p) => p.project(x),
            ScoreProvider::LogRegPs(m) | ScoreProvider::NnPs(m) => column(m.predict(x)?),
            ScoreProvider::PcaLogRegPs { pca, model } => column(model.predict(&pca.project(x)?)?),
            ScoreProvider::NnLayer { model, layer } => model.pre_activation_batch(x, *layer),
            ScoreProvider::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                column((0..x.rows()).map(|_| rng.random::<f64>()).collect())
            }
        }
    }

    /// The propensity estimate, for propensity-score providers.
    pub fn propensity(&self, x: &Matrix) -> Result<Option<Vec<f64>>> {
        if self.kind().is_propensity() {
            Ok(Some(self.score(x)?.into_data()))
        } else {
            Ok(None)
        }
    }

    /// The exact affine map for raw covariates, PCA and the first network layer.
    pub fn linear_map(&self) -> Option<LinearMapMeta> {
        match self {
            ScoreProvider::RawX { dim } => Some(LinearMapMeta {
                weights: Matrix::identity(*dim),
                bias: vec![0.0; *dim],
            }),
            ScoreProvider::Pca(p) => {
                let (weights, bias) = p.affine();
                Some(LinearMapMeta { weights, bias })
            }
            ScoreProvider::NnLayer { model, layer: 1 } => {
                let l = &model.layers()[0];
                Some(LinearMapMeta {
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
            }
            _ => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProviderDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ProviderDoc>(text)?.into_provider()
    }
}

/// Free-standing alias for [`ScoreProvider::linear_map`].
pub fn linear_map_of(provider: &ScoreProvider) -> Option<LinearMapMeta> {
    provider.linear_map()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PcaDoc {
    requested_k: usize,
    dim: usize,
    #[serde(with = "codec::vec")]
    mean: Vec<f64>,
    /// Row-major `k x dim`.
    #[serde(with = "codec::vec")]
    components: Vec<f64>,
}

impl From<&PcaModel> for PcaDoc {
    fn from(p: &PcaModel) -> Self {
        PcaDoc {
            requested_k: p.requested_k,
            dim: p.mean.len(),
            mean: p.mean.clone(),
            components: p.components.data().to_vec(),
        }
    }
}

impl PcaDoc {
    fn into_model(self) -> Result<PcaModel> {
        if self.dim == 0 || !self.components.len().is_multiple_of(self.dim) || self.mean.len() != self.dim {
            return Err(shape("inconsistent PCA document"));
        }
        let k = self.components.len() / self.dim;
        Ok(PcaModel {
            mean: self.mean,
            components: Matrix::new(k, self.dim, self.components)?,
            requested_k: self.requested_k,
        })
    }
}

/// Provider file: the network format plus a kind tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ProviderDoc {
    RawX { dim: usize },
    Pca { pca: PcaDoc },
    LogRegPs { model: ModelDoc },
    PcaLogRegPs { pca: PcaDoc, model: ModelDoc },
    NnLayer { layer: usize, model: ModelDoc },
    NnPs { model: ModelDoc },
    Random { seed: u64 },
}

impl From<&ScoreProvider> for ProviderDoc {
    fn from(p: &ScoreProvider) -> Self {
        match p {
            ScoreProvider::RawX { dim } => ProviderDoc::RawX { dim: *dim },
            ScoreProvider::Pca(pca) => ProviderDoc::Pca { pca: pca.into() },
            ScoreProvider::LogRegPs(m) => ProviderDoc::LogRegPs { model: m.into() },
            ScoreProvider::PcaLogRegPs { pca, model } => ProviderDoc::PcaLogRegPs {
                pca: pca.into(),
                model: model.into(),
            },
            ScoreProvider::NnLayer { model, layer } => ProviderDoc::NnLayer {
                layer: *layer,
                model: model.into(),
            },
            ScoreProvider::NnPs(m) => ProviderDoc::NnPs { model: m.into() },
            ScoreProvider::Random { seed } => ProviderDoc::Random { seed: *seed },
        }
    }
}

impl ProviderDoc {
    fn into_provider(self) -> Result<ScoreProvider> {
        Ok(match self {
            ProviderDoc::RawX { dim } => ScoreProvider::RawX { dim },
            ProviderDoc::Pca { pca } => ScoreProvider::Pca(pca.into_model()?),
            ProviderDoc::LogRegPs { model } => ScoreProvider::LogRegPs(model.into_model()?),
            ProviderDoc::PcaLogRegPs { pca, model } => ScoreProvider::PcaLogRegPs {
                pca: pca.into_model()?,
                model: model.into_model()?,
            },
            ProviderDoc::NnLayer { layer, model } => {
                ScoreProvider::nn_layer(model.into_model()?, layer)?
            }
            ProviderDoc::NnPs { model } => ScoreProvider::NnPs(model.into_model()?),
            ProviderDoc::Random { seed } => ScoreProvider::Random { seed },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{default_architecture, sigmoid};
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn pca_exact_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = gaussian(&mut rng, 40, 2);
        let a = gaussian(&mut rng, 2, 5);
        let x = z.matmul(&a).unwrap();
        let p = fit_pca(&x, 2).unwrap();
        let proj = p.project(&x).unwrap();
        let back = proj.matmul(&p.components).unwrap();
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                assert!((back[(r, c)] + p.mean[c] - x[(r, c)]).abs() < 1e-9);
            }
        }
        let vvt = p.components.matmul(&p.components.transpose()).unwrap();
        assert!(vvt.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-9);
        // a third component does not exist
        let p3 = fit_pca(&x, 3).unwrap();
        assert!(p3.reduced() && p3.k() == 2);
    }

    #[test]
    fn pca_line_direction() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![3.0, 3.0], vec![-2.0, -2.0]])
            .unwrap();
        let p = fit_pca(&x, 1).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((p.components[(0, 0)] - r).abs() < 1e-12 && (p.components[(0, 1)] - r).abs() < 1e-12);
    }

    #[test]
    fn pca_full_rank_is_isometry_and_decorrelates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, 30, 4);
        let p = fit_pca(&x, 4).unwrap();
        let proj = p.project(&x).unwrap();
        for i in 0..30 {
            for j in 0..i {
                let dx = linalg::norm2(&x.row(i).iter().zip(x.row(j)).map(|(a, b)| a - b).collect::<Vec<_>>());
                let dp = linalg::norm2(
                    &proj.row(i).iter().zip(proj.row(j)).map(|(a, b)| a - b).collect::<Vec<_>>(),
                );
                assert!((dx - dp).abs() < 1e-9);
            }
        }
        let cov = proj.transpose().matmul(&proj).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert!(cov[(a, b)].abs() / 30.0 < 1e-6);
                }
            }
        }
    }

    #[test]
    fn logreg_recovers_known_propensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5000;
        let x = gaussian(&mut rng, n, 1);
        let e: Vec<f64> = (0..n).map(|i| sigmoid(2.0 * x[(i, 0)])).collect();
        let t: Vec<bool> = e.iter().map(|&p| rng.random_bool(p)).collect();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            max_epochs: 60,
            ..TrainConfig::default()
        };
        let p = fit_logreg(&x, &t, &cfg).unwrap();
        let e_hat = p.propensity(&x).unwrap().unwrap();
        let err = crate::metrics::calibration_error(&e_hat, &e).unwrap();
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn logreg_zero_rate_is_one_half_and_constant_propensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4000;
        let x = gaussian(&mut rng, n, 2);
        let t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let frozen = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let p = fit_logreg(&x, &t, &frozen).unwrap();
        assert!(p.score(&x).unwrap().data().iter().all(|&v| v == 0.5));
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 1000,
            max_epochs: 30,
            ..TrainConfig::default()
        };
        let p = fit_logreg(&x, &t, &cfg).unwrap();
        let test = gaussian(&mut rng, 200, 2);
        let worst = p.score(&test).unwrap().data().iter().fold(0.0f64, |m, v| m.max((v - 0.5).abs()));
        assert!(worst < 0.05, "{worst}");
        let single = vec![true; n];
        assert!(fit_logreg(&x, &single, &cfg).is_err());
    }

    #[test]
    fn score_paths_agree() {
        let mut m = default_architecture(4).unwrap();
        m.initialize(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(&mut rng, 20, 4);
        let raw = ScoreProvider::RawX { dim: 4 };
        assert_eq!(raw.score(&x).unwrap(), x);
        let layer = ScoreProvider::nn_layer(m.clone(), 1).unwrap();
        assert_eq!(layer.score(&x).unwrap().cols(), 5);
        let ps = ScoreProvider::NnPs(m.clone());
        let s = ps.score(&x).unwrap();
        for r in 0..20 {
            assert_eq!(s[(r, 0)], m.forward(x.row(r)).unwrap());
        }
        let rnd = ScoreProvider::Random { seed: 9 };
        assert_eq!(rnd.score(&x).unwrap(), rnd.score(&x).unwrap());
        assert!(raw.score(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn linear_maps_reproduce_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = gaussian(&mut rng, 50, 3);
        let mut m = default_architecture(3).unwrap();
        m.initialize(6);
        let providers = vec![
            ScoreProvider::RawX { dim: 3 },
            ScoreProvider::Pca(fit_pca(&x, 2).unwrap()),
            ScoreProvider::nn_layer(m.clone(), 1).unwrap(),
        ];
        let probe = gaussian(&mut rng, 1000, 3);
        for p in &providers {
            let meta = p.linear_map().unwrap();
            let s = p.score(&probe).unwrap();
            for r in 0..probe.rows() {
                let lin = meta.weights.matvec(probe.row(r)).unwrap();
                for (c, v) in lin.iter().enumerate() {
                    assert!((s[(r, c)] - v - meta.bias[c]).abs() < 1e-12);
                }
            }
        }
        let meta = providers[2].linear_map().unwrap();
        assert_eq!(meta.weights, m.layers()[0].weights);
        assert_eq!(meta.bias, m.layers()[0].bias);
        assert!(ScoreProvider::NnPs(m.clone()).linear_map().is_none());
        assert!(ScoreProvider::nn_layer(m, 2).unwrap().linear_map().is_none());
    }

    #[test]
    fn provider_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = gaussian(&mut rng, 10, 3);
        let mut m = default_architecture(3).unwrap();
        m.initialize(7);
        for p in [
            ScoreProvider::RawX { dim: 3 },
            ScoreProvider::Pca(fit_pca(&x, 2).unwrap()),
            ScoreProvider::nn_layer(m.clone(), 2).unwrap(),
            ScoreProvider::NnPs(m),
            ScoreProvider::Random { seed: 3 },
        ] {
            assert_eq!(ScoreProvider::from_json(&p.to_json().unwrap()).unwrap(), p);
        }
    }
}
