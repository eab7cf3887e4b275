//! Nearest-neighbour matching in score space and the ATT estimators built on it.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{invalid, shape, Error, Result};
use crate::linalg::Matrix;
use crate::metrics::DiscreteJoint;

/// Treated-to-control match weights `w_ij` and the aggregated control weights `w_j`.
///
/// Indices are rows of the dataset the scores were computed on. Treated units
/// carry weight one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchWeights {
    pub pairs: BTreeMap<usize, Vec<(usize, f64)>>,
    /// `w_j = sum_i w_ij / sum_j' w_ij'`.
    pub aggregated: BTreeMap<usize, f64>,
}

impl MatchWeights {
    pub fn from_pairs(pairs: BTreeMap<usize, Vec<(usize, f64)>>) -> Result<Self> {
        let mut aggregated = BTreeMap::new();
        for (i, matches) in &pairs {
            if matches.iter().any(|&(_, w)| !(w > 0.0 && w.is_finite())) {
                return Err(invalid(format!("treated unit {i} has a non-positive match weight")));
            }
            let total: f64 = matches.iter().map(|m| m.1).sum();
            for &(j, w) in matches {
                *aggregated.entry(j).or_insert(0.0) += w / total;
            }
        }
        Ok(Self { pairs, aggregated })
    }

    /// Control weights without a pair structure.
    pub fn from_aggregated(aggregated: BTreeMap<usize, f64>) -> Self {
        Self {
            pairs: BTreeMap::new(),
            aggregated,
        }
    }

    /// Every control at weight `N_t / N_c`, i.e. no matching at all.
    pub fn uniform_controls(t: &[bool]) -> Result<Self> {
        let nt = t.iter().filter(|&&x| x).count();
        let controls: Vec<usize> = (0..t.len()).filter(|&j| !t[j]).collect();
        if nt == 0 || controls.is_empty() {
            return Err(Error::Degenerate("both arms must be non-empty".into()));
        }
        let w = nt as f64 / controls.len() as f64;
        Ok(Self::from_aggregated(controls.into_iter().map(|j| (j, w)).collect()))
    }

    pub fn total_weight(&self) -> f64 {
        self.aggregated.values().sum()
    }

    /// CSV with columns `treated_index,control_index,w_ij`.
    pub fn write_pairs_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "treated_index,control_index,w_ij")?;
        for (i, matches) in &self.pairs {
            for (j, w) in matches {
                writeln!(out, "{i},{j},{w}")?;
            }
        }
        Ok(())
    }

    /// CSV with columns `control_index,w_j`.
    pub fn write_aggregated_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "control_index,w_j")?;
        for (j, w) in &self.aggregated {
            writeln!(out, "{j},{w}")?;
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` closest of `candidates`, ties to the lower index.
fn nearest(query: &[f64], scores: &Matrix, candidates: &[usize], k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for &j in candidates {
        let d = squared_distance(query, scores.row(j));
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, bj)| bd < d || (bd == d && bj < j));
        best.insert(pos, (d, j));
        best.truncate(k);
    }
    best.into_iter().map(|(_, j)| j).collect()
}

/// `k` nearest controls per treated unit by Euclidean distance between score rows.
pub fn knn_match(scores: &Matrix, t: &[bool], k: usize, with_replacement: bool) -> Result<MatchWeights> {
    if t.len() != scores.rows() {
        return Err(shape(format!("{} labels for {} score rows", t.len(), scores.rows())));
    }
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let treated: Vec<usize> = (0..t.len()).filter(|&i| t[i]).collect();
    let controls: Vec<usize> = (0..t.len()).filter(|&j| !t[j]).collect();
    let needed = if with_replacement { k } else { k * treated.len() };
    if controls.len() < needed {
        return Err(invalid(format!(
            "{} controls available but {needed} required",
            controls.len()
        )));
    }
    let pairs: BTreeMap<usize, Vec<(usize, f64)>> = if with_replacement {
        treated
            .par_iter()
            .map(|&i| {
                let m = nearest(scores.row(i), scores, &controls, k);
                (i, m.into_iter().map(|j| (j, 1.0)).collect())
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    } else {
        let mut available = controls;
        let mut out = BTreeMap::new();
        for &i in &treated {
            let m = nearest(scores.row(i), scores, &available, k);
            available.retain(|j| !m.contains(j));
            out.insert(i, m.into_iter().map(|j| (j, 1.0)).collect());
        }
        out
    };
    MatchWeights::from_pairs(pairs)
}

/// One control per treated unit, drawn uniformly with replacement.
pub fn random_match(treated: &[usize], controls: &[usize], seed: u64) -> Result<MatchWeights> {
    if controls.is_empty() {
        return Err(invalid("random matching needs at least one control"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = treated
        .iter()
        .map(|&i| (i, vec![(controls[rng.random_range(0..controls.len())], 1.0)]))
        .collect();
    MatchWeights::from_pairs(pairs)
}

/// `Y_i(0)` estimated as the weighted mean of the matched control outcomes.
pub fn estimate_y0(weights: &MatchWeights, y: &[f64], i: usize) -> Result<f64> {
    let matches = weights
        .pairs
        .get(&i)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| invalid(format!("treated unit {i} has no match")))?;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(j, w) in matches {
        let yj = y
            .get(j)
            .ok_or_else(|| invalid(format!("control index {j} out of range")))?;
        num += w * yj;
        den += w;
    }
    Ok(num / den)
}

/// Mean over treated units of `Y_i - Y_i(0)`.
pub fn estimate_att(dataset: &Dataset, weights: &MatchWeights) -> Result<f64> {
    let treated = dataset.treated_indices();
    if treated.is_empty() {
        return Err(Error::Degenerate("no treated units".into()));
    }
    let mut total = 0.0;
    for &i in &treated {
        total += dataset.y[i] - estimate_y0(weights, &dataset.y, i)?;
    }
    Ok(total / treated.len() as f64)
}

/// Mean of `mu1 - mu0` over the treated units.
pub fn ground_truth_att(dataset: &Dataset) -> Result<f64> {
    let (Some(mu0), Some(mu1)) = (&dataset.mu0, &dataset.mu1) else {
        return Err(invalid("ground-truth ATT needs mu0 and mu1"));
    };
    let treated = dataset.treated_indices();
    if treated.is_empty() {
        return Err(Error::Degenerate("no treated units".into()));
    }
    Ok(treated.iter().map(|&i| mu1[i] - mu0[i]).sum::<f64>() / treated.len() as f64)
}

/// Exact matching on the score of a finite joint.
///
/// Treated mass is kept; within each score level the control law is kept and
/// the level's control mass is set so `P'(b | T = 0) = P(b | T = 1)`.
pub fn match_discrete(joint: &DiscreteJoint) -> Result<DiscreteJoint> {
    let p0 = joint.arm_mass(false);
    let treated_levels = joint.level_given_t(true);
    let control_levels = joint.level_joint(false);
    for (k, (&pt, &pc)) in treated_levels.iter().zip(&control_levels).enumerate() {
        if pt > 0.0 && pc <= 0.0 {
            return Err(invalid(format!(
                "no control mass at score level {:?}",
                joint.level_values()[k]
            )));
        }
    }
    let probs = (0..joint.len())
        .map(|s| {
            let k = joint.level_of()[s];
            let control = if control_levels[k] > 0.0 {
                p0 * treated_levels[k] * joint.p(s, false) / control_levels[k]
            } else {
                0.0
            };
            [control, joint.p(s, true)]
        })
        .collect();
    joint.with_probs(probs)
}
