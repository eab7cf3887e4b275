//! Synthetic data: a continuous generator with known propensity and outcome
//! means, finite scenarios for exact checks, and the train/val/test split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{standardize_continuous, Dataset};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, dot, norm2, Matrix};
use crate::metrics::DiscreteJoint;
use crate::nn::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityForm {
    /// `logit e = a * s + c`.
    LogisticOnProjection,
    /// `logit e = a * sum_{k <= degree} s^k / k + c`.
    PolynomialOnProjection { degree: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeForm {
    Linear,
    Exponential,
}

fn default_base_effect() -> f64 {
    2.0
}
fn default_covariate_noise() -> f64 {
    0.1
}
fn default_assignment_strength() -> f64 {
    1.0
}
fn default_standardize() -> bool {
    true
}

/// Covariates `X = A z + noise` with `z ~ N(0, I_latent)` and `A` orthonormal columns.
///
/// Treatment and outcomes depend on `X` only through the projection `A^T X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub d_observed: usize,
    pub d_latent: usize,
    pub treated_fraction_target: f64,
    pub propensity_form: PropensityForm,
    pub outcome_form: OutcomeForm,
    pub effect_heterogeneity: f64,
    pub noise_sd: f64,
    pub overlap_clamp: f64,
    pub seed: u64,
    /// Constant part of the treatment effect.
    #[serde(default = "default_base_effect")]
    pub base_effect: f64,
    /// Standard deviation of the isotropic noise added to `A z`.
    #[serde(default = "default_covariate_noise")]
    pub covariate_noise: f64,
    /// Slope `a` of the assignment logit.
    #[serde(default = "default_assignment_strength")]
    pub assignment_strength: f64,
    /// Centre and scale the observed covariates.
    #[serde(default = "default_standardize")]
    pub standardize: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            d_observed: 20,
            d_latent: 5,
            treated_fraction_target: 0.35,
            propensity_form: PropensityForm::LogisticOnProjection,
            outcome_form: OutcomeForm::Linear,
            effect_heterogeneity: 0.0,
            noise_sd: 1.0,
            overlap_clamp: 0.02,
            seed: 0,
            base_effect: default_base_effect(),
            covariate_noise: default_covariate_noise(),
            assignment_strength: default_assignment_strength(),
            standardize: default_standardize(),
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(invalid("n must be at least 2"));
        }
        if self.d_latent == 0 || self.d_latent > self.d_observed {
            return Err(invalid(format!(
                "need 1 <= d_latent <= d_observed, got {} and {}",
                self.d_latent, self.d_observed
            )));
        }
        if !(self.treated_fraction_target > 0.0 && self.treated_fraction_target < 1.0) {
            return Err(invalid("treated fraction target must lie in (0, 1)"));
        }
        if !(self.overlap_clamp > 0.0 && self.overlap_clamp < 0.5) {
            return Err(invalid("overlap clamp must lie in (0, 0.5)"));
        }
        let low = self.overlap_clamp;
        if self.treated_fraction_target <= low || self.treated_fraction_target >= 1.0 - low {
            return Err(Error::Degenerate(format!(
                "target fraction {} is unreachable with propensities clamped to [{low}, {}]",
                self.treated_fraction_target,
                1.0 - low
            )));
        }
        for (name, v) in [
            ("effect_heterogeneity", self.effect_heterogeneity),
            ("noise_sd", self.noise_sd),
            ("covariate_noise", self.covariate_noise),
            ("assignment_strength", self.assignment_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if !self.base_effect.is_finite() {
            return Err(invalid("base_effect must be finite"));
        }
        if let PropensityForm::PolynomialOnProjection { degree } = self.propensity_form {
            if degree == 0 {
                return Err(invalid("polynomial degree must be at least 1"));
            }
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gram-Schmidt on the columns of a `rows x cols` Gaussian matrix.
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = normal_vec(rng, rows);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm2(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Matrix::from_fn(rows, cols, |r, c| basis[c][r])
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn clamped_mean(logits: &[f64], c: f64, clamp: f64) -> f64 {
    logits
        .iter()
        .map(|&q| sigmoid(q + c).clamp(clamp, 1.0 - clamp))
        .sum::<f64>()
        / logits.len() as f64
}

/// Intercept `c` with mean clamped propensity equal to `target`, by bisection.
fn calibrate_intercept(logits: &[f64], target: f64, clamp: f64) -> f64 {
    let (mut lo, mut hi) = (-100.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clamped_mean(logits, mid, clamp) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One draw from the generator; deterministic in `cfg.seed`.
pub fn generate(cfg: &DgpConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d, k) = (cfg.n, cfg.d_observed, cfg.d_latent);
    let a = orthonormal_columns(&mut rng, d, k);
    let theta = unit(normal_vec(&mut rng, k));
    let gamma = normal_vec(&mut rng, k);
    let delta = unit(normal_vec(&mut rng, k));
    let proj_sd = (1.0 + cfg.covariate_noise * cfg.covariate_noise).sqrt();

    let mut x = Matrix::zeros(n, d);
    let mut proj = Matrix::zeros(n, k);
    for i in 0..n {
        let z = normal_vec(&mut rng, k);
        let row = x.row_mut(i);
        for (r, v) in row.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = dot(a.row(r), &z) + cfg.covariate_noise * noise;
        }
        let xi = x.row(i).to_vec();
        for c in 0..k {
            proj[(i, c)] = (0..d).map(|r| a[(r, c)] * xi[r]).sum();
        }
    }

    let s: Vec<f64> = (0..n).map(|i| dot(&theta, proj.row(i)) / proj_sd).collect();
    let logits: Vec<f64> = s
        .iter()
        .map(|&si| {
            let q = match cfg.propensity_form {
                PropensityForm::LogisticOnProjection => si,
                PropensityForm::PolynomialOnProjection { degree } => (1..=degree)
                    .map(|p| si.powi(p as i32) / p as f64)
                    .sum(),
            };
            cfg.assignment_strength * q
        })
        .collect();
    let c = calibrate_intercept(&logits, cfg.treated_fraction_target, cfg.overlap_clamp);
    let e: Vec<f64> = logits
        .iter()
        .map(|&q| sigmoid(q + c).clamp(cfg.overlap_clamp, 1.0 - cfg.overlap_clamp))
        .collect();
    let t: Vec<bool> = e.iter().map(|&p| rng.random_bool(p)).collect();
    if t.iter().all(|&v| v) || t.iter().all(|&v| !v) {
        return Err(Error::Degenerate("every unit landed in the same arm".into()));
    }

    let scale = (k as f64).sqrt();
    let mut mu0 = Vec::with_capacity(n);
    let mut mu1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let p = proj.row(i);
        let g = dot(&gamma, p) / scale;
        let base = match cfg.outcome_form {
            OutcomeForm::Linear => g,
            OutcomeForm::Exponential => g.exp(),
        };
        let tau = cfg.base_effect + cfg.effect_heterogeneity * dot(&delta, p) / proj_sd;
        mu0.push(base);
        mu1.push(base + tau);
        let noise: f64 = StandardNormal.sample(&mut rng);
        let mean = if t[i] { base + tau } else { base };
        y.push(mean + cfg.noise_sd * noise);
    }
    if cfg.standardize {
        standardize_continuous(&mut x);
    }
    Dataset::new(x, t, y)?
        .with_propensity(e)?
        .with_outcome_means(mu0, mu1)
}

/// Train/validation/test ratios and the shuffle seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

/// Index sets of a seeded shuffle cut into contiguous pieces.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    let r = spec.ratios;
    if r.iter().any(|&v| !(v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios must be positive and sum to 1, got {r:?}")));
    }
    let n_train = (n as f64 * r[0]).round() as usize;
    let n_val = (n as f64 * r[1]).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(invalid(format!("{n} rows cannot fill three non-empty splits")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}

/// `(train, val, test)`; each must contain both arms.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split_indices(dataset.len(), spec)?;
    let parts = [a, b, c].map(|idx| dataset.subset(&idx));
    for (name, part) in ["train", "validation", "test"].iter().zip(&parts) {
        let nt = part.n_treated();
        if nt == 0 || nt == part.len() {
            return Err(Error::Degenerate(format!("{name} split lacks one treatment arm")));
        }
    }
    let [train, val, test] = parts;
    Ok((train, val, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioKind {
    /// `P(T = 1 | x)` depends on `x` only through the score level.
    Balancing,
    /// Each point's propensity is moved by up to `perturbation` around its level's value.
    NonBalancing { perturbation: f64 },
}

/// Probabilities `w / sum(w)` for integer weights drawn from `1..=16`.
fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(1..=16) as f64).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// A propensity `j / 16` with `2 <= j <= 14`.
fn level_propensity(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(2..=14) as f64 / 16.0
}

fn perturbed(kind: ScenarioKind, base: f64, r: f64) -> f64 {
    match kind {
        ScenarioKind::Balancing => base,
        ScenarioKind::NonBalancing { perturbation } => {
            (base + perturbation * r).clamp(1.0 / 32.0, 31.0 / 32.0)
        }
    }
}

/// A finite joint on `support_size` points with a score of `score_levels` levels.
///
/// Point `s` sits at `(s, r_s)` with a small random integer `r_s` and has
/// level `s mod score_levels`; the score value of level `k` is `k`.
pub fn discrete_scenario(
    kind: ScenarioKind,
    support_size: usize,
    score_levels: usize,
    seed: u64,
) -> Result<DiscreteJoint> {
    if score_levels == 0 || score_levels > support_size {
        return Err(invalid(format!(
            "need 1 <= score_levels <= support_size, got {score_levels} and {support_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level_of: Vec<usize> = (0..support_size).map(|s| s % score_levels).collect();
    let p_level = simplex(&mut rng, score_levels);
    let pi: Vec<f64> = (0..score_levels).map(|_| level_propensity(&mut rng)).collect();
    let raw: Vec<f64> = (0..support_size).map(|_| rng.random_range(1..=16) as f64).collect();
    let mut within = vec![0.0; score_levels];
    for (s, &k) in level_of.iter().enumerate() {
        within[k] += raw[s];
    }
    let support: Vec<Vec<f64>> = (0..support_size)
        .map(|s| vec![s as f64, rng.random_range(0..10) as f64])
        .collect();
    let jitter: Vec<f64> = (0..support_size).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let probs = (0..support_size)
        .map(|s| {
            let k = level_of[s];
            let px = p_level[k] * raw[s] / within[k];
            let e = perturbed(kind, pi[k], jitter[s]);
            [px * (1.0 - e), px * e]
        })
        .collect();
    let level_values = (0..score_levels).map(|k| vec![k as f64]).collect();
    DiscreteJoint::new(support, probs, level_of, level_values)
}

/// A finite joint whose score is exactly `b(x) = W x`, with `W` returned alongside.
#[derive(Debug, Clone)]
pub struct LinearScenario {
    pub joint: DiscreteJoint,
    pub w: Matrix,
}

/// Points `x_{k,m} = W^+ beta_k + N u_m` with `N` a null-space basis of `W`.
///
/// `P(x_{k,m}) = P(k) Q(m)`, so the null-space coordinate is independent of
/// the score level. Under `Balancing` the propensity of `x_{k,m}` is that of
/// level `k`; `NonBalancing` perturbs it per point and keeps `P(x)`.
pub fn linear_scenario(
    kind: ScenarioKind,
    x_dim: usize,
    b_dim: usize,
    levels: usize,
    null_points: usize,
    seed: u64,
) -> Result<LinearScenario> {
    if x_dim == 0 || b_dim == 0 || levels == 0 || null_points == 0 {
        return Err(invalid("dimensions and counts must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::from_fn(b_dim, x_dim, |_, _| StandardNormal.sample(&mut rng));
    let svd = linalg::svd(&w)?;
    let tol = linalg::default_rank_tol(b_dim, x_dim, svd.max());
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    // rows of the full right basis beyond the rank span the null space
    let full_v = null_space_basis(&w, &svd.v_t, rank);
    let null_dim = full_v.len();
    let null_points = if null_dim == 0 { 1 } else { null_points };
    let pinv = linalg::pseudo_inverse(&w, None)?;

    let p_level = simplex(&mut rng, levels);
    let q_null = simplex(&mut rng, null_points);
    let pi: Vec<f64> = (0..levels).map(|_| level_propensity(&mut rng)).collect();
    let mut level_values = Vec::with_capacity(levels);
    let mut bases = Vec::with_capacity(levels);
    for _ in 0..levels {
        let y: Vec<f64> = (0..x_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let beta = w.matvec(&y)?;
        bases.push(pinv.matvec(&beta)?);
        level_values.push(beta);
    }
    let coeffs: Vec<Vec<f64>> = (0..null_points)
        .map(|_| (0..null_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mut support = Vec::new();
    let mut probs = Vec::new();
    let mut level_of = Vec::new();
    for k in 0..levels {
        for m in 0..null_points {
            let mut x = bases[k].clone();
            for (c, v) in coeffs[m].iter().zip(&full_v) {
                x.iter_mut().zip(v).for_each(|(xi, vi)| *xi += c * vi);
            }
            let r: f64 = rng.random_range(-1.0..=1.0);
            let e = perturbed(kind, pi[k], r);
            let px = p_level[k] * q_null[m];
            support.push(x);
            probs.push([px * (1.0 - e), px * e]);
            level_of.push(k);
        }
    }
    Ok(LinearScenario {
        joint: DiscreteJoint::new(support, probs, level_of, level_values)?,
        w,
    })
}

/// Orthonormal basis of `{x : W x = 0}` completing the first `rank` rows of `v_t`.
fn null_space_basis(w: &Matrix, v_t: &Matrix, rank: usize) -> Vec<Vec<f64>> {
    let n = w.cols();
    let mut basis: Vec<Vec<f64>> = (0..rank).map(|r| v_t.row(r).to_vec()).collect();
    let mut null = Vec::new();
    for e in 0..n {
        if basis.len() == n {
            break;
        }
        let mut v = vec![0.0; n];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = norm2(&v);
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v.clone());
            null.push(v);
        }
    }
    null
}

/// The two intermediate scores of a propensity `e = f2(f1(x))` on a finite support.
#[derive(Debug, Clone)]
pub struct LayeredScenario {
    /// Score `f1(x) = x mod inner_levels`.
    pub b1: DiscreteJoint,
    /// Score `f2(f1(x))`, the propensity itself.
    pub b2: DiscreteJoint,
}

pub fn layered_scenario(support_size: usize, inner_levels: usize, seed: u64) -> Result<LayeredScenario> {
    if inner_levels == 0 || inner_levels > support_size {
        return Err(invalid("need 1 <= inner_levels <= support_size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = simplex(&mut rng, support_size);
    // f2 is not injective in general: several inner levels can share a propensity
    let f2: Vec<f64> = (0..inner_levels).map(|_| rng.random_range(2..=6) as f64 / 8.0).collect();
    let support: Vec<Vec<f64>> = (0..support_size).map(|s| vec![s as f64]).collect();
    let probs: Vec<[f64; 2]> = (0..support_size)
        .map(|s| {
            let e = f2[s % inner_levels];
            [px[s] * (1.0 - e), px[s] * e]
        })
        .collect();
    let m = inner_levels as f64;
    let b1 = DiscreteJoint::with_score(support.clone(), probs.clone(), |x| vec![x[0] % m])?;
    let b2 = DiscreteJoint::with_score(support, probs, |x| vec![f2[(x[0] % m) as usize]])?;
    Ok(LayeredScenario { b1, b2 })
}
