//! Bounds on covariate imbalance from score imbalance.
//!
//! For a score `b = W^(L) h^(L)(... W^(1) h^(1)(x))` with bi-Lipschitz
//! activations `m |a - b| <= |h(a) - h(b)| <= M |a - b|`, the covariate
//! Wasserstein imbalance lies in `[alpha_L * s, beta_L * s]` where `s` is the
//! score imbalance,
//!
//! ```text
//! alpha_L = 1 / (prod |||W^(l)||| * prod M^(l))
//! beta_L  = prod |||W^(l)+||| / prod m^(l)
//! ```
//!
//! and `|||.|||` is the spectral norm. Linear scores (`L = 1`, identity inner
//! function) also bound the linear MMD. When the score is not balancing, the
//! upper end grows by the expected conditional-independence gaps `e1 + e0`.
//! Biases never enter: the discrepancies are translation invariant.

use serde::{Serialize, Serializer};

use crate::error::{invalid, shape, Result};
use crate::linalg::{self, Matrix};
use crate::metrics::{discrepancy, Discrepancy, EmpiricalPair};
use crate::nn::{sigmoid, ActivationKind, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LipschitzSource {
    ExactGlobal,
    /// Valid for inputs with `|b| <= bound`.
    BoundedDomain { bound: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzConstants {
    pub m: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
    pub source: LipschitzSource,
}

impl LipschitzConstants {
    pub const IDENTITY: LipschitzConstants = LipschitzConstants {
        m: 1.0,
        big_m: 1.0,
        source: LipschitzSource::ExactGlobal,
    };
}

pub fn activation_lipschitz(kind: ActivationKind, domain_bound: Option<f64>) -> LipschitzConstants {
    match kind {
        ActivationKind::Identity => LipschitzConstants::IDENTITY,
        ActivationKind::LeakyRelu { slope } => LipschitzConstants {
            m: slope,
            big_m: 1.0,
            source: LipschitzSource::ExactGlobal,
        },
        ActivationKind::Sigmoid => match domain_bound {
            Some(b) => {
                let s = sigmoid(b.abs());
                LipschitzConstants {
                    m: s * (1.0 - s),
                    big_m: 0.25,
                    source: LipschitzSource::BoundedDomain { bound: b.abs() },
                }
            }
            None => LipschitzConstants {
                m: 0.0,
                big_m: 0.25,
                source: LipschitzSource::ExactGlobal,
            },
        },
    }
}

fn inf_as_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundConstants {
    pub norm_w: Vec<f64>,
    pub norm_w_pinv: Vec<f64>,
    pub m: Vec<f64>,
    #[serde(rename = "M")]
    pub big_m: Vec<f64>,
    pub alpha: f64,
    #[serde(serialize_with = "inf_as_string")]
    pub beta: f64,
    /// Sigmoid input bound used for the constants, when one was needed.
    pub domain_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorTerms {
    pub e1: f64,
    pub e0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub metric: Discrepancy,
    pub score_imbalance: f64,
    pub lower: f64,
    #[serde(serialize_with = "inf_as_string")]
    pub upper: f64,
    pub constants: BoundConstants,
    pub error_terms: Option<ErrorTerms>,
}

fn check_imbalance(score_imbalance: f64) -> Result<()> {
    if !(score_imbalance >= 0.0 && score_imbalance.is_finite()) {
        return Err(invalid(format!(
            "score imbalance must be finite and non-negative, got {score_imbalance}"
        )));
    }
    Ok(())
}

/// Linear score `b(x) = W x`: `[s / sigma_max, s / sigma_min]` for Wass or linear MMD.
pub fn linear_bounds(w: &Matrix, score_imbalance: f64, metric: Discrepancy) -> Result<BoundReport> {
    if metric == Discrepancy::Tv {
        return Err(invalid("linear bounds cover Wass and linear MMD only"));
    }
    multilayer_bounds(&[(w.clone(), LipschitzConstants::IDENTITY)], score_imbalance, metric)
}

/// `layers[l]` pairs `W^(l)` with the constants of the activation applied before it.
pub fn multilayer_bounds(
    layers: &[(Matrix, LipschitzConstants)],
    score_imbalance: f64,
    metric: Discrepancy,
) -> Result<BoundReport> {
    if layers.is_empty() {
        return Err(invalid("at least one layer is required"));
    }
    check_imbalance(score_imbalance)?;
    let linear = layers.len() == 1 && layers[0].1 == LipschitzConstants::IDENTITY;
    match metric {
        Discrepancy::Wass => {}
        Discrepancy::LinearMmd if linear => {}
        Discrepancy::LinearMmd => {
            return Err(invalid("linear MMD bounds need a single linear layer"))
        }
        Discrepancy::Tv => return Err(invalid("TV needs no constants; use tv_bounds")),
    }
    for (l, pair) in layers.windows(2).enumerate() {
        if pair[0].0.rows() != pair[1].0.cols() {
            return Err(shape(format!(
                "W^({}) has {} rows but W^({}) has {} columns",
                l + 1,
                pair[0].0.rows(),
                l + 2,
                pair[1].0.cols()
            )));
        }
    }

    let mut c = BoundConstants {
        norm_w: Vec::new(),
        norm_w_pinv: Vec::new(),
        m: Vec::new(),
        big_m: Vec::new(),
        alpha: 0.0,
        beta: 0.0,
        domain_bound: None,
    };
    for (l, (w, lip)) in layers.iter().enumerate() {
        if lip.m < 0.0 || lip.big_m <= 0.0 || lip.m > lip.big_m {
            return Err(invalid(format!(
                "layer {} needs 0 <= m <= M and M > 0, got m = {}, M = {}",
                l + 1,
                lip.m,
                lip.big_m
            )));
        }
        let Some((smax, smin)) = linalg::singular_extremes(w, None)? else {
            return Err(invalid(format!("W^({}) is the zero matrix", l + 1)));
        };
        c.norm_w.push(smax);
        c.norm_w_pinv.push(1.0 / smin);
        c.m.push(lip.m);
        c.big_m.push(lip.big_m);
        if let LipschitzSource::BoundedDomain { bound } = lip.source {
            c.domain_bound = Some(c.domain_bound.map_or(bound, |b: f64| b.max(bound)));
        }
    }
    let prod = |v: &[f64]| v.iter().product::<f64>();
    c.alpha = 1.0 / (prod(&c.norm_w) * prod(&c.big_m));
    let m_prod = prod(&c.m);
    c.beta = if m_prod > 0.0 {
        prod(&c.norm_w_pinv) / m_prod
    } else {
        f64::INFINITY
    };
    let upper = if c.beta.is_infinite() {
        f64::INFINITY
    } else {
        c.beta * score_imbalance
    };
    Ok(BoundReport {
        metric,
        score_imbalance,
        lower: c.alpha * score_imbalance,
        upper,
        constants: c,
        error_terms: None,
    })
}

/// TV imbalance of a balancing score equals the TV imbalance of the covariates.
pub fn tv_bounds(score_tv: f64) -> Result<BoundReport> {
    check_imbalance(score_tv)?;
    Ok(BoundReport {
        metric: Discrepancy::Tv,
        score_imbalance: score_tv,
        lower: score_tv,
        upper: score_tv,
        constants: BoundConstants {
            norm_w: Vec::new(),
            norm_w_pinv: Vec::new(),
            m: Vec::new(),
            big_m: Vec::new(),
            alpha: 1.0,
            beta: 1.0,
            domain_bound: None,
        },
        error_terms: None,
    })
}

/// Adds the expected gaps `e1 + e0` to the upper end; the lower end holds for any score.
pub fn corrected_bounds(report: &BoundReport, e1: f64, e0: f64) -> Result<BoundReport> {
    if !(e1 >= 0.0 && e0 >= 0.0) {
        return Err(invalid(format!("error terms must be non-negative, got ({e1}, {e0})")));
    }
    let mut out = report.clone();
    out.upper += e1 + e0;
    out.error_terms = Some(ErrorTerms { e1, e0 });
    Ok(out)
}

/// The `(W, constants)` chain for layer `layer_index` of a network.
///
/// `domain_bound` is the input bound used for any sigmoid activation inside the chain.
pub fn network_chain(
    model: &Mlp,
    layer_index: usize,
    domain_bound: Option<f64>,
) -> Result<Vec<(Matrix, LipschitzConstants)>> {
    if layer_index == 0 || layer_index > model.depth() {
        return Err(invalid(format!(
            "layer index {layer_index} outside 1..={}",
            model.depth()
        )));
    }
    let layers = model.layers();
    Ok((0..layer_index)
        .map(|l| {
            let lip = if l == 0 {
                LipschitzConstants::IDENTITY
            } else {
                activation_lipschitz(layers[l - 1].activation, domain_bound)
            };
            (layers[l].weights.clone(), lip)
        })
        .collect())
}

/// Largest `|pre-activation|` feeding any sigmoid inside the chain of `layer_index`.
pub fn sigmoid_domain_bound(model: &Mlp, x: &Matrix, layer_index: usize) -> Result<Option<f64>> {
    let mut bound: Option<f64> = None;
    for l in 1..layer_index {
        if model.layers()[l - 1].activation == ActivationKind::Sigmoid {
            let z = model.pre_activation_batch(x, l)?;
            let b = z.max_abs();
            bound = Some(bound.map_or(b, |v| v.max(b)));
        }
    }
    Ok(bound)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedEstimate {
    pub e1: f64,
    pub e0: f64,
    pub n_bins: usize,
    /// `(bin, treated)` cells skipped because the arm had no units there.
    pub skipped: Vec<(usize, bool)>,
}

/// 1-D projection of the scores: the column itself, or the first principal direction.
fn project(scores: &Matrix) -> Result<Vec<f64>> {
    if scores.cols() == 1 {
        return Ok(scores.column(0));
    }
    let n = scores.rows();
    let means: Vec<f64> = (0..scores.cols())
        .map(|c| scores.column(c).iter().sum::<f64>() / n as f64)
        .collect();
    let centered = Matrix::from_fn(n, scores.cols(), |r, c| scores[(r, c)] - means[c]);
    if centered.is_zero() {
        return Ok(vec![0.0; n]);
    }
    let dir = linalg::svd(&centered)?.v_t.row(0).to_vec();
    Ok(scores.row_iter().map(|r| linalg::dot(r, &dir)).collect())
}

/// Bin labels: one bin per distinct value when there are at most `n_bins`, else equal-mass quantile bins with ties kept together.
fn bin_labels(values: &[f64], n_bins: usize) -> (Vec<usize>, usize) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut distinct = 0;
    for (r, &i) in order.iter().enumerate() {
        if r == 0 || values[i] != values[order[r - 1]] {
            distinct += 1;
        }
    }
    let mut labels = vec![0; n];
    if distinct <= n_bins {
        let mut bin = 0;
        for (r, &i) in order.iter().enumerate() {
            if r > 0 && values[i] != values[order[r - 1]] {
                bin += 1;
            }
            labels[i] = bin;
        }
        return (labels, distinct);
    }
    for (r, &i) in order.iter().enumerate() {
        labels[i] = if r > 0 && values[i] == values[order[r - 1]] {
            labels[order[r - 1]]
        } else {
            (r * n_bins / n).min(n_bins - 1)
        };
    }
    (labels, n_bins)
}

/// Sample estimate of the expected gaps for linear MMD, by binning the score.
///
/// Within each bin, arm-`t` covariates are compared with all covariates in
/// the bin; bins are averaged with arm-`t` weights. A diagnostic only.
pub fn binned_error_estimate(
    scores: &Matrix,
    covariates: &Matrix,
    t: &[bool],
    n_bins: usize,
) -> Result<BinnedEstimate> {
    if n_bins == 0 {
        return Err(invalid("at least one bin is required"));
    }
    if scores.rows() != covariates.rows() || t.len() != scores.rows() {
        return Err(shape("scores, covariates and labels must have equal length"));
    }
    if !t.iter().any(|&x| x) || t.iter().all(|&x| x) {
        return Err(invalid("both arms must be present"));
    }
    let (labels, bins) = bin_labels(&project(scores)?, n_bins);
    let mut members = vec![Vec::new(); bins];
    for (i, &b) in labels.iter().enumerate() {
        members[b].push(i);
    }
    let mut skipped = Vec::new();
    let mut e = [0.0, 0.0];
    for treated in [true, false] {
        let mut total_w = 0.0;
        let mut acc = 0.0;
        for (b, rows) in members.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let arm: Vec<usize> = rows.iter().copied().filter(|&i| t[i] == treated).collect();
            if arm.is_empty() {
                skipped.push((b, treated));
                continue;
            }
            let pair = EmpiricalPair::new(covariates.select_rows(&arm), covariates.select_rows(rows))?;
            let w = arm.len() as f64;
            acc += w * discrepancy(&pair, Discrepancy::LinearMmd)?;
            total_w += w;
        }
        e[treated as usize] = acc / total_w;
    }
    skipped.sort();
    Ok(BinnedEstimate {
        e1: e[1],
        e0: e[0],
        n_bins: bins,
        skipped,
    })
}
