use std::collections::HashMap;

use serde::Serialize;

use super::{discrepancy, Discrepancy, EmpiricalPair};
use crate::error::{invalid, shape, Error, Result};
use crate::linalg::Matrix;

const SUM_TOL: f64 = 1e-12;

/// A finite joint law `p(x, t)` together with a deterministic score `b(x)`.
///
/// The score is stored as a level index per support point plus the score
/// value of each level.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    support: Vec<Vec<f64>>,
    /// `probs[s] = [p(s, T = 0), p(s, T = 1)]`.
    probs: Vec<[f64; 2]>,
    level_of: Vec<usize>,
    level_values: Vec<Vec<f64>>,
}

fn bits_key(v: &[f64]) -> Vec<u64> {
    // -0.0 and 0.0 are the same point
    v.iter().map(|x| (x + 0.0).to_bits()).collect()
}

impl DiscreteJoint {
    pub fn new(
        support: Vec<Vec<f64>>,
        probs: Vec<[f64; 2]>,
        level_of: Vec<usize>,
        level_values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = support.len();
        if n == 0 {
            return Err(invalid("empty support"));
        }
        if probs.len() != n || level_of.len() != n {
            return Err(shape("support, probabilities and levels must have equal length"));
        }
        let d = support[0].len();
        if d == 0 || support.iter().any(|x| x.len() != d) {
            return Err(shape("support vectors must share a positive dimension"));
        }
        if support.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("support".into()));
        }
        let mut seen = HashMap::new();
        for (s, x) in support.iter().enumerate() {
            if let Some(prev) = seen.insert(bits_key(x), s) {
                return Err(invalid(format!("support points {prev} and {s} coincide")));
            }
        }
        if probs.iter().flatten().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().flatten().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        d_of(&level_values)?;
        if level_of.iter().any(|&k| k >= level_values.len()) {
            return Err(invalid("level index out of range"));
        }
        let mut seen = HashMap::new();
        for (k, v) in level_values.iter().enumerate() {
            if seen.insert(bits_key(v), k).is_some() {
                return Err(invalid(format!("score level {k} repeats an earlier value")));
            }
        }
        let joint = Self {
            support,
            probs,
            level_of,
            level_values,
        };
        if joint.arm_mass(false) <= 0.0 || joint.arm_mass(true) <= 0.0 {
            return Err(Error::Degenerate("one treatment arm has zero mass".into()));
        }
        Ok(joint)
    }

    /// Levels are the distinct values of `score`, in order of first appearance.
    pub fn with_score(
        support: Vec<Vec<f64>>,
        probs: Vec<[f64; 2]>,
        score: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let mut index = HashMap::new();
        let mut level_values = Vec::new();
        let mut level_of = Vec::with_capacity(support.len());
        for x in &support {
            let v: Vec<f64> = score(x).into_iter().map(|b| b + 0.0).collect();
            let k = *index.entry(bits_key(&v)).or_insert_with(|| {
                level_values.push(v.clone());
                level_values.len() - 1
            });
            level_of.push(k);
        }
        Self::new(support, probs, level_of, level_values)
    }

    /// Same law, score `b(x) = x`.
    pub fn identity_score(support: Vec<Vec<f64>>, probs: Vec<[f64; 2]>) -> Result<Self> {
        Self::with_score(support, probs, |x| x.to_vec())
    }

    /// Same law under another score.
    pub fn rescore(&self, score: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        Self::with_score(self.support.clone(), self.probs.clone(), score)
    }

    /// Same support and score, new probabilities.
    pub fn with_probs(&self, probs: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(
            self.support.clone(),
            probs,
            self.level_of.clone(),
            self.level_values.clone(),
        )
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn probs(&self) -> &[[f64; 2]] {
        &self.probs
    }

    pub fn level_of(&self) -> &[usize] {
        &self.level_of
    }

    pub fn level_values(&self) -> &[Vec<f64>] {
        &self.level_values
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn n_levels(&self) -> usize {
        self.level_values.len()
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn p(&self, s: usize, treated: bool) -> f64 {
        self.probs[s][treated as usize]
    }

    /// `P(T = t)`.
    pub fn arm_mass(&self, treated: bool) -> f64 {
        self.probs.iter().map(|p| p[treated as usize]).sum()
    }

    /// `P(X = x_s | T = t)` for every `s`.
    pub fn x_given_t(&self, treated: bool) -> Vec<f64> {
        let mass = self.arm_mass(treated);
        self.probs.iter().map(|p| p[treated as usize] / mass).collect()
    }

    /// `P(X = x_s)`.
    pub fn x_marginal(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p[0] + p[1]).collect()
    }

    /// `P(b = level k | T = t)`.
    pub fn level_given_t(&self, treated: bool) -> Vec<f64> {
        let mut out = vec![0.0; self.n_levels()];
        for (s, &k) in self.level_of.iter().enumerate() {
            out[k] += self.p(s, treated);
        }
        let mass = self.arm_mass(treated);
        out.iter_mut().for_each(|v| *v /= mass);
        out
    }

    /// `P(b = level k, T = t)`.
    pub fn level_joint(&self, treated: bool) -> Vec<f64> {
        let mut out = vec![0.0; self.n_levels()];
        for (s, &k) in self.level_of.iter().enumerate() {
            out[k] += self.p(s, treated);
        }
        out
    }

    pub fn members(&self, level: usize) -> Vec<usize> {
        (0..self.len()).filter(|&s| self.level_of[s] == level).collect()
    }

    /// `P(T = 1 | X = x_s)`, undefined on zero-mass points.
    pub fn propensity(&self, s: usize) -> Option<f64> {
        let total = self.probs[s][0] + self.probs[s][1];
        (total > 0.0).then(|| self.probs[s][1] / total)
    }

    /// Largest spread of `P(T = 1 | x)` within a score level.
    pub fn propensity_spread(&self) -> f64 {
        let mut lo = vec![f64::INFINITY; self.n_levels()];
        let mut hi = vec![f64::NEG_INFINITY; self.n_levels()];
        for s in 0..self.len() {
            if let Some(e) = self.propensity(s) {
                let k = self.level_of[s];
                lo[k] = lo[k].min(e);
                hi[k] = hi[k].max(e);
            }
        }
        lo.iter()
            .zip(&hi)
            .filter(|(l, _)| l.is_finite())
            .map(|(l, h)| h - l)
            .fold(0.0, f64::max)
    }

    pub fn support_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.support).expect("validated support")
    }

    pub fn level_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.level_values).expect("validated levels")
    }
}

fn d_of(level_values: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = level_values.first() else {
        return Err(invalid("a score needs at least one level"));
    };
    let d = first.len();
    if d == 0 || level_values.iter().any(|v| v.len() != d) {
        return Err(shape("score values must share a positive dimension"));
    }
    if level_values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score values".into()));
    }
    Ok(d)
}

fn half_l1(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Discrepancy between two mass functions on the rows of `points`.
fn between(points: &Matrix, p: &[f64], q: &[f64], kind: Discrepancy) -> Result<f64> {
    match kind {
        Discrepancy::Tv => Ok(half_l1(p, q)),
        _ => {
            let pair = EmpiricalPair::weighted(points.clone(), points.clone(), p.to_vec(), q.to_vec())?;
            discrepancy(&pair, kind)
        }
    }
}

/// `TV(P(. | T = 1), P(. | T = 0))` over covariates, or over score values when `on_score`.
pub fn tv_discrete(joint: &DiscreteJoint, on_score: bool) -> f64 {
    if on_score {
        half_l1(&joint.level_given_t(true), &joint.level_given_t(false))
    } else {
        half_l1(&joint.x_given_t(true), &joint.x_given_t(false))
    }
}

/// Exact treated-vs-control discrepancy of the covariate law.
pub fn covariate_imbalance(joint: &DiscreteJoint, kind: Discrepancy) -> Result<f64> {
    between(
        &joint.support_matrix(),
        &joint.x_given_t(true),
        &joint.x_given_t(false),
        kind,
    )
}

/// Exact treated-vs-control discrepancy of the score law.
pub fn score_imbalance(joint: &DiscreteJoint, kind: Discrepancy) -> Result<f64> {
    between(
        &joint.level_matrix(),
        &joint.level_given_t(true),
        &joint.level_given_t(false),
        kind,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapTerms {
    pub tv: f64,
    pub linear_mmd: f64,
    pub wass: f64,
}

impl GapTerms {
    const ZERO: GapTerms = GapTerms {
        tv: 0.0,
        linear_mmd: 0.0,
        wass: 0.0,
    };

    pub fn get(&self, kind: Discrepancy) -> f64 {
        match kind {
            Discrepancy::Tv => self.tv,
            Discrepancy::LinearMmd => self.linear_mmd,
            Discrepancy::Wass => self.wass,
        }
    }

    fn max_abs(&self) -> f64 {
        self.tv.abs().max(self.linear_mmd.abs()).max(self.wass.abs())
    }
}

/// One `(level, arm)` cell of the conditional-independence gap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapCell {
    pub level: usize,
    pub treated: bool,
    /// `P(b = level | T = t)`; the expectation weight of this cell.
    pub weight: f64,
    /// `None` when the level has no mass in this arm.
    pub eps: Option<GapTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub cells: Vec<GapCell>,
    /// `E[eps_1(b(X)) | T = 1]`.
    pub e1: GapTerms,
    /// `E[eps_0(b(X)) | T = 0]`.
    pub e0: GapTerms,
}

impl GapReport {
    pub fn expected(&self, kind: Discrepancy) -> (f64, f64) {
        (self.e1.get(kind), self.e0.get(kind))
    }

    /// Largest `eps` over all defined cells and discrepancies.
    pub fn max_eps(&self) -> f64 {
        self.cells
            .iter()
            .filter_map(|c| c.eps.map(|e| e.max_abs()))
            .fold(0.0, f64::max)
    }
}

/// `eps_{t,b}(beta) = D(P(X | b = beta, T = t), P(X | b = beta))` by enumeration, and its arm expectations.
pub fn conditional_independence_gap(joint: &DiscreteJoint) -> Result<GapReport> {
    let mut cells = Vec::new();
    let mut e = [GapTerms::ZERO, GapTerms::ZERO];
    for level in 0..joint.n_levels() {
        let members = joint.members(level);
        let points = Matrix::from_rows(
            &members
                .iter()
                .map(|&s| joint.support[s].clone())
                .collect::<Vec<_>>(),
        )?;
        let pooled: Vec<f64> = members
            .iter()
            .map(|&s| joint.probs[s][0] + joint.probs[s][1])
            .collect();
        let pooled_mass: f64 = pooled.iter().sum();
        for treated in [true, false] {
            let arm: Vec<f64> = members.iter().map(|&s| joint.p(s, treated)).collect();
            let mass: f64 = arm.iter().sum();
            let weight = mass / joint.arm_mass(treated);
            if mass <= 0.0 {
                cells.push(GapCell {
                    level,
                    treated,
                    weight: 0.0,
                    eps: None,
                });
                continue;
            }
            let cond: Vec<f64> = arm.iter().map(|p| p / mass).collect();
            let pool: Vec<f64> = pooled.iter().map(|p| p / pooled_mass).collect();
            let terms = GapTerms {
                tv: half_l1(&cond, &pool),
                linear_mmd: between(&points, &cond, &pool, Discrepancy::LinearMmd)?,
                wass: between(&points, &cond, &pool, Discrepancy::Wass)?,
            };
            let slot = &mut e[treated as usize];
            slot.tv += weight * terms.tv;
            slot.linear_mmd += weight * terms.linear_mmd;
            slot.wass += weight * terms.wass;
            cells.push(GapCell {
                level,
                treated,
                weight,
                eps: Some(terms),
            });
        }
    }
    Ok(GapReport {
        cells,
        e1: e[1],
        e0: e[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    /// `p(s, t)` from `P(X = s)` and `P(T = 1 | X = s)`.
    fn from_propensity(px: &[f64], e: &[f64]) -> Vec<[f64; 2]> {
        px.iter().zip(e).map(|(p, e)| [p * (1.0 - e), p * e]).collect()
    }

    #[test]
    fn tv_examples() {
        let j = DiscreteJoint::identity_score(pts(&[0.0, 1.0]), vec![[0.25, 0.25], [0.25, 0.25]])
            .unwrap();
        assert_eq!(tv_discrete(&j, false), 0.0);
        // P(.|T=1) = (0.5, 0.5), P(.|T=0) = (1, 0)
        let j = DiscreteJoint::identity_score(pts(&[0.0, 1.0]), vec![[0.5, 0.25], [0.0, 0.25]])
            .unwrap();
        assert!((tv_discrete(&j, false) - 0.5).abs() < 1e-15);
        let constant = j.rescore(|_| vec![7.0]).unwrap();
        assert_eq!(tv_discrete(&constant, true), 0.0);
        assert!((tv_discrete(&constant, false) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_score_has_no_gap() {
        let probs = from_propensity(&[0.1, 0.2, 0.3, 0.4], &[0.9, 0.5, 0.2, 0.5]);
        let j = DiscreteJoint::identity_score(pts(&[0.0, 1.0, 2.0, 3.0]), probs).unwrap();
        assert_eq!(conditional_independence_gap(&j).unwrap().max_eps(), 0.0);
    }

    #[test]
    fn score_through_propensity_has_no_gap() {
        // e depends on x only through x mod 2
        let e = [0.2, 0.7, 0.2, 0.7, 0.2, 0.7];
        let probs = from_propensity(&[0.1, 0.2, 0.1, 0.25, 0.15, 0.2], &e);
        let j = DiscreteJoint::with_score(pts(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), probs, |x| {
            vec![x[0] % 2.0]
        })
        .unwrap();
        let gap = conditional_independence_gap(&j).unwrap();
        assert!(gap.max_eps() < 1e-12, "{}", gap.max_eps());
        assert!((tv_discrete(&j, false) - tv_discrete(&j, true)).abs() < 1e-12);
    }

    #[test]
    fn four_point_non_balancing_gap() {
        let probs = from_propensity(&[0.25; 4], &[0.9, 0.5, 0.5, 0.5]);
        let j = DiscreteJoint::with_score(pts(&[0.0, 1.0, 2.0, 3.0]), probs, |x| vec![x[0] % 2.0])
            .unwrap();
        let gap = conditional_independence_gap(&j).unwrap();
        let cell = gap
            .cells
            .iter()
            .find(|c| c.level == 0 && c.treated)
            .unwrap();
        let eps = cell.eps.unwrap();
        // level 0 holds x = 0, 2: P(X|b=0,T=1) = (0.9, 0.5)/1.4, P(X|b=0) = (0.5, 0.5)
        let expected_tv = (0.9f64 / 1.4 - 0.5).abs();
        assert!((eps.tv - expected_tv).abs() < 1e-15);
        // distance between the two points is 2
        assert!((eps.wass - 2.0 * expected_tv).abs() < 1e-12);
        assert!((eps.linear_mmd - 2.0 * expected_tv).abs() < 1e-12);
        // propensity is constant on level 1
        let other = gap
            .cells
            .iter()
            .find(|c| c.level == 1 && c.treated)
            .unwrap();
        assert!(other.eps.unwrap().tv < 1e-15);
    }

    #[test]
    fn zero_mass_cells_are_undefined() {
        let probs = vec![[0.3, 0.0], [0.2, 0.5]];
        let j = DiscreteJoint::identity_score(pts(&[0.0, 1.0]), probs).unwrap();
        let gap = conditional_independence_gap(&j).unwrap();
        let undefined: Vec<_> = gap.cells.iter().filter(|c| c.eps.is_none()).collect();
        assert_eq!(undefined.len(), 1);
        assert!(undefined[0].treated && undefined[0].level == 0);
    }

    #[test]
    fn validation() {
        assert!(DiscreteJoint::identity_score(pts(&[0.0, 1.0]), vec![[0.5, 0.0], [0.5, 0.0]]).is_err());
        assert!(DiscreteJoint::identity_score(pts(&[0.0, 0.0]), vec![[0.25; 2]; 2]).is_err());
        assert!(DiscreteJoint::identity_score(pts(&[0.0, 1.0]), vec![[0.3; 2]; 2]).is_err());
    }

    #[test]
    fn imbalance_in_both_spaces() {
        let probs = vec![[0.5, 0.25], [0.0, 0.25]];
        let j = DiscreteJoint::identity_score(pts(&[0.0, 3.0]), probs).unwrap();
        // treated mean 1.5, control mean 0
        assert!((covariate_imbalance(&j, Discrepancy::LinearMmd).unwrap() - 1.5).abs() < 1e-15);
        assert!((covariate_imbalance(&j, Discrepancy::Wass).unwrap() - 1.5).abs() < 1e-12);
        assert!((score_imbalance(&j, Discrepancy::Tv).unwrap() - 0.5).abs() < 1e-15);
    }
}
