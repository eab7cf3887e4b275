//! Discrepancies between the treated and control distributions, and the
//! evaluation metrics of the experiment harness.

mod discrete;
mod transport;

pub use discrete::{
    conditional_independence_gap, covariate_imbalance, score_imbalance, tv_discrete, DiscreteJoint,
    GapCell, GapReport, GapTerms,
};
pub use transport::{
    transport, wasserstein_bruteforce, wasserstein_exact, wasserstein_exact_with_cap,
    TransportSolution, DEFAULT_COST_CAP,
};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{norm2, Matrix};
use crate::matching::MatchWeights;

/// Which probability discrepancy to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discrepancy {
    /// Half the L1 distance between mass functions; finite supports only.
    Tv,
    /// Euclidean distance between the means.
    LinearMmd,
    /// Order-1 optimal transport cost with Euclidean ground cost.
    Wass,
}

impl std::str::FromStr for Discrepancy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tv" => Ok(Discrepancy::Tv),
            "mmd" | "linear_mmd" | "linearmmd" => Ok(Discrepancy::LinearMmd),
            "wass" | "wasserstein" => Ok(Discrepancy::Wass),
            other => Err(invalid(format!(
                "unknown metric {other:?}; expected tv, linear_mmd or wass"
            ))),
        }
    }
}

fn normalized(weights: Vec<f64>, side: &str) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(invalid(format!("{side} weights must be finite and non-negative")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(invalid(format!("{side} weights sum to zero")));
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Weighted treated and control point clouds in a common space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPair {
    treated: Matrix,
    control: Matrix,
    treated_weights: Vec<f64>,
    control_weights: Vec<f64>,
}

impl EmpiricalPair {
    /// Uniform weights on both sides.
    pub fn new(treated: Matrix, control: Matrix) -> Result<Self> {
        let nt = treated.rows();
        let nc = control.rows();
        Self::weighted(treated, control, vec![1.0; nt], vec![1.0; nc])
    }

    /// Weights are normalised to sum to one on each side.
    pub fn weighted(
        treated: Matrix,
        control: Matrix,
        treated_weights: Vec<f64>,
        control_weights: Vec<f64>,
    ) -> Result<Self> {
        if treated.rows() == 0 || control.rows() == 0 {
            return Err(invalid("both sides of an empirical pair must be non-empty"));
        }
        if treated.cols() != control.cols() {
            return Err(shape(format!(
                "treated points have dimension {}, control points {}",
                treated.cols(),
                control.cols()
            )));
        }
        if treated_weights.len() != treated.rows() || control_weights.len() != control.rows() {
            return Err(shape("one weight per point is required"));
        }
        Ok(Self {
            treated,
            control,
            treated_weights: normalized(treated_weights, "treated")?,
            control_weights: normalized(control_weights, "control")?,
        })
    }

    /// Treated rows at weight one against controls weighted by `weights.aggregated`.
    pub fn from_matching(points: &Matrix, t: &[bool], weights: &MatchWeights) -> Result<Self> {
        if t.len() != points.rows() {
            return Err(shape(format!("{} labels for {} rows", t.len(), points.rows())));
        }
        let treated: Vec<usize> = (0..t.len()).filter(|&i| t[i]).collect();
        let (control, w): (Vec<usize>, Vec<f64>) = weights
            .aggregated
            .iter()
            .filter(|(_, &w)| w > 0.0)
            .map(|(&j, &w)| (j, w))
            .unzip();
        if control.iter().any(|&j| j >= t.len() || t[j]) {
            return Err(invalid("match weights reference a row that is not a control"));
        }
        if control.is_empty() {
            return Err(invalid("match weights are all zero"));
        }
        let nt = treated.len();
        Self::weighted(
            points.select_rows(&treated),
            points.select_rows(&control),
            vec![1.0; nt],
            w,
        )
    }

    pub fn treated(&self) -> &Matrix {
        &self.treated
    }

    pub fn control(&self) -> &Matrix {
        &self.control
    }

    pub fn treated_weights(&self) -> &[f64] {
        &self.treated_weights
    }

    pub fn control_weights(&self) -> &[f64] {
        &self.control_weights
    }

    pub fn dim(&self) -> usize {
        self.treated.cols()
    }

    /// Both sides mapped through `x -> W x + bias`.
    pub fn map_linear(&self, w: &Matrix, bias: Option<&[f64]>) -> Result<Self> {
        let apply = |m: &Matrix| -> Result<Matrix> {
            let mut out = m.matmul(&w.transpose())?;
            if let Some(b) = bias {
                if b.len() != w.rows() {
                    return Err(shape("bias length differs from the map's output dimension"));
                }
                for r in 0..out.rows() {
                    for (v, bv) in out.row_mut(r).iter_mut().zip(b) {
                        *v += bv;
                    }
                }
            }
            Ok(out)
        };
        Ok(Self {
            treated: apply(&self.treated)?,
            control: apply(&self.control)?,
            treated_weights: self.treated_weights.clone(),
            control_weights: self.control_weights.clone(),
        })
    }

    pub fn treated_mean(&self) -> Vec<f64> {
        weighted_mean(&self.treated, &self.treated_weights)
    }

    pub fn control_mean(&self) -> Vec<f64> {
        weighted_mean(&self.control, &self.control_weights)
    }
}

pub(crate) fn weighted_mean(points: &Matrix, weights: &[f64]) -> Vec<f64> {
    let mut mean = vec![0.0; points.cols()];
    for (row, &w) in points.row_iter().zip(weights) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += w * v;
        }
    }
    mean
}

fn mean_gap(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&d)
}

pub fn linear_mmd(pair: &EmpiricalPair) -> f64 {
    mean_gap(&pair.treated_mean(), &pair.control_mean())
}

/// `Wass` or `LinearMmd` of an empirical pair; TV is undefined on continuous samples.
pub fn discrepancy(pair: &EmpiricalPair, kind: Discrepancy) -> Result<f64> {
    match kind {
        Discrepancy::LinearMmd => Ok(linear_mmd(pair)),
        Discrepancy::Wass => wasserstein_exact(pair),
        Discrepancy::Tv => Err(invalid(
            "total variation is only available on finite discrete distributions",
        )),
    }
}

/// Squared distance between the treated covariate mean and the match-weighted control mean.
pub fn sample_imbalance(dataset: &Dataset, weights: &MatchWeights) -> Result<f64> {
    let total: f64 = weights.aggregated.values().sum();
    if total <= 0.0 {
        return Err(invalid("match weights are all zero"));
    }
    let treated = dataset.treated_indices();
    if treated.is_empty() {
        return Err(Error::Degenerate("no treated units".into()));
    }
    let d = dataset.dim();
    let mut mt = vec![0.0; d];
    for &i in &treated {
        for (m, v) in mt.iter_mut().zip(dataset.x.row(i)) {
            *m += v;
        }
    }
    mt.iter_mut().for_each(|m| *m /= treated.len() as f64);
    let mut mc = vec![0.0; d];
    for (&j, &w) in &weights.aggregated {
        if j >= dataset.len() || dataset.t[j] {
            return Err(invalid(format!("weight on row {j}, which is not a control")));
        }
        for (m, v) in mc.iter_mut().zip(dataset.x.row(j)) {
            *m += w * v;
        }
    }
    mc.iter_mut().for_each(|m| *m /= total);
    Ok(mean_gap(&mt, &mc).powi(2))
}

pub fn calibration_error(e_hat: &[f64], e_true: &[f64]) -> Result<f64> {
    if e_hat.len() != e_true.len() {
        return Err(shape(format!(
            "{} estimates for {} true propensities",
            e_hat.len(),
            e_true.len()
        )));
    }
    if e_hat.is_empty() {
        return Err(invalid("calibration error of an empty sample"));
    }
    if e_hat.iter().chain(e_true).any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid("propensities must lie in [0, 1]"));
    }
    Ok(e_hat
        .iter()
        .zip(e_true)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / e_hat.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn mmd_examples() {
        let a = m(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let same = EmpiricalPair::new(a.clone(), a.clone()).unwrap();
        assert_eq!(linear_mmd(&same), 0.0);
        let p = EmpiricalPair::new(a, m(&[&[1.0, 1.0]])).unwrap();
        assert!((linear_mmd(&p) - 1.0).abs() < 1e-15);
        let shifted = p
            .map_linear(&Matrix::identity(2), Some(&[5.0, -3.0]))
            .unwrap();
        assert!((linear_mmd(&shifted) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibration_error(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let c = calibration_error(&[0.4, 0.6], &[0.5, 0.5]).unwrap();
        assert!((c - 0.1).abs() < 1e-15);
        assert!(calibration_error(&[0.5], &[0.5, 0.5]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e: Vec<f64> = (0..200_000).map(|_| rng.random::<f64>()).collect();
        let c = calibration_error(&vec![0.5; e.len()], &e).unwrap();
        assert!((c - 0.25).abs() < 0.005, "{c}");
    }

    fn toy_dataset() -> Dataset {
        let x = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[2.0, 1.0], &[9.0, 9.0]]);
        Dataset::new(x, vec![true, true, false, false, false], vec![0.0; 5]).unwrap()
    }

    #[test]
    fn sample_imbalance_examples() {
        let ds = toy_dataset();
        // controls 2 and 3 average to (1, 1); treated mean is (1, 0)
        let w = MatchWeights::from_aggregated(BTreeMap::from([(2, 1.0), (3, 1.0)]));
        assert!((sample_imbalance(&ds, &w).unwrap() - 1.0).abs() < 1e-15);
        let pair = EmpiricalPair::from_matching(&ds.x, &ds.t, &w).unwrap();
        assert!((linear_mmd(&pair).powi(2) - 1.0).abs() < 1e-12);
        let zero = MatchWeights::from_aggregated(BTreeMap::from([(2, 0.0)]));
        assert!(sample_imbalance(&ds, &zero).is_err());
        let bad = MatchWeights::from_aggregated(BTreeMap::from([(0, 1.0)]));
        assert!(sample_imbalance(&ds, &bad).is_err());
    }

    #[test]
    fn sample_imbalance_is_squared_mmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 12;
            let x = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let t: Vec<bool> = (0..n).map(|i| i < 4).collect();
            let ds = Dataset::new(x, t, vec![0.0; n]).unwrap();
            let agg: BTreeMap<usize, f64> = (4..n).map(|j| (j, rng.random_range(0.1..3.0))).collect();
            let w = MatchWeights::from_aggregated(agg);
            let pair = EmpiricalPair::from_matching(&ds.x, &ds.t, &w).unwrap();
            let diff = sample_imbalance(&ds, &w).unwrap() - linear_mmd(&pair).powi(2);
            assert!(diff.abs() < 1e-12);
        }
    }

    #[test]
    fn pair_validation() {
        assert!(EmpiricalPair::new(Matrix::zeros(0, 2), m(&[&[1.0, 1.0]])).is_err());
        assert!(EmpiricalPair::new(m(&[&[1.0]]), m(&[&[1.0, 1.0]])).is_err());
        assert!(EmpiricalPair::weighted(m(&[&[1.0]]), m(&[&[1.0]]), vec![-1.0], vec![1.0]).is_err());
        let p = EmpiricalPair::weighted(m(&[&[1.0]]), m(&[&[2.0], &[3.0]]), vec![4.0], vec![1.0, 3.0])
            .unwrap();
        assert_eq!(p.treated_weights(), &[1.0]);
        assert_eq!(p.control_weights(), &[0.25, 0.75]);
        assert!("wasserstein".parse::<Discrepancy>().is_ok());
        assert!("l2".parse::<Discrepancy>().is_err());
    }
}
