//! Property suites checked against exact or independent oracles.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Result};
use nsm_core::bounds::{corrected_bounds, linear_bounds, tv_bounds};
use nsm_core::dgp::{discrete_scenario, layered_scenario, linear_scenario, ScenarioKind};
use nsm_core::linalg::{self, Matrix};
use nsm_core::matching::match_discrete;
use nsm_core::metrics::{
    conditional_independence_gap, covariate_imbalance, discrepancy, score_imbalance,
    tv_discrete, wasserstein_bruteforce, wasserstein_exact,
};
use nsm_core::nn::{finite_difference_gradient, ActivationKind, Mlp};
use nsm_core::{Discrepancy, EmpiricalPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    TvEquality,
    BoundSandwich,
    LowerBound,
    CorrectedBounds,
    MatchingPreservesBalance,
    LayeredBalancing,
    OtBruteforce,
    GradientCheck,
    LinalgIdentities,
}

impl Suite {
    pub const ALL: [Suite; 9] = [
        Suite::TvEquality,
        Suite::BoundSandwich,
        Suite::LowerBound,
        Suite::CorrectedBounds,
        Suite::MatchingPreservesBalance,
        Suite::LayeredBalancing,
        Suite::OtBruteforce,
        Suite::GradientCheck,
        Suite::LinalgIdentities,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::TvEquality => "tv_equality",
            Suite::BoundSandwich => "bound_sandwich",
            Suite::LowerBound => "lower_bound",
            Suite::CorrectedBounds => "corrected_bounds",
            Suite::MatchingPreservesBalance => "matching_preserves_balance",
            Suite::LayeredBalancing => "layered_balancing",
            Suite::OtBruteforce => "ot_bruteforce",
            Suite::GradientCheck => "gradient_check",
            Suite::LinalgIdentities => "linalg_identities",
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            Suite::TvEquality | Suite::MatchingPreservesBalance | Suite::LayeredBalancing => 1e-12,
            Suite::LowerBound => 0.0,
            Suite::GradientCheck => 1e-4,
            _ => 1e-9,
        }
    }

    pub fn default_trials(&self) -> usize {
        match self {
            Suite::TvEquality | Suite::BoundSandwich | Suite::CorrectedBounds => 100,
            Suite::MatchingPreservesBalance | Suite::LayeredBalancing => 50,
            Suite::OtBruteforce => 500,
            Suite::GradientCheck => 10,
            Suite::LowerBound | Suite::LinalgIdentities => 1000,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match Suite::ALL.iter().find(|x| x.name() == s) {
            Some(x) => Ok(*x),
            None => {
                let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
                bail!("unknown suite {s:?}; expected one of {}", names.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub trials: usize,
    pub failures: usize,
    pub worst_deviation: f64,
    pub tolerance: f64,
    /// Seed of the worst failing trial.
    pub failing_seed: Option<u64>,
    pub seconds: f64,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} trials, {} failures, worst deviation {:e} (tolerance {:e}), {:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.trials,
            self.failures,
            self.worst_deviation,
            self.tolerance,
            self.seconds
        )?;
        if let Some(s) = self.failing_seed {
            write!(f, ", failing seed {s}")?;
        }
        Ok(())
    }
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(trial as u64)
}

/// Runs `trials` instances; each returns its deviation from the oracle.
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<SuiteReport> {
    if trials == 0 {
        bail!("trials must be at least 1");
    }
    let start = Instant::now();
    let tol = suite.tolerance();
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut failing_seed = None;
    let mut worst_failure = f64::NEG_INFINITY;
    for trial in 0..trials {
        let s = trial_seed(seed, trial);
        let dev = match trial_deviation(suite, s) {
            Ok(d) if d.is_nan() => f64::INFINITY,
            Ok(d) => d,
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(dev);
        let failed = if suite == Suite::LowerBound { dev > 0.0 } else { dev > tol };
        if failed {
            failures += 1;
            if dev > worst_failure {
                worst_failure = dev;
                failing_seed = Some(s);
            }
        }
    }
    Ok(SuiteReport {
        suite,
        passed: failures == 0,
        trials,
        failures,
        worst_deviation: worst,
        tolerance: tol,
        failing_seed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn trial_deviation(suite: Suite, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match suite {
        Suite::TvEquality => tv_equality(&mut rng),
        Suite::BoundSandwich => bound_sandwich(&mut rng),
        Suite::LowerBound => lower_bound(&mut rng),
        Suite::CorrectedBounds => corrected(&mut rng),
        Suite::MatchingPreservesBalance => matching_balance(&mut rng),
        Suite::LayeredBalancing => layered(&mut rng),
        Suite::OtBruteforce => ot_bruteforce(&mut rng),
        Suite::GradientCheck => gradient_check(&mut rng),
        Suite::LinalgIdentities => linalg_identities(&mut rng),
    }
}

fn tv_equality(rng: &mut ChaCha8Rng) -> Result<f64> {
    let support = rng.random_range(2..=12);
    let levels = rng.random_range(1..=support);
    let j = discrete_scenario(ScenarioKind::Balancing, support, levels, rng.random())?;
    Ok((tv_discrete(&j, false) - tv_discrete(&j, true)).abs())
}

/// Amount by which `value` leaves `[lower, upper]`.
fn outside(value: f64, lower: f64, upper: f64) -> f64 {
    (lower - value).max(value - upper).max(0.0)
}

fn random_linear(rng: &mut ChaCha8Rng, kind: ScenarioKind) -> Result<nsm_core::dgp::LinearScenario> {
    let x_dim = rng.random_range(1..=4);
    let b_dim = rng.random_range(1..=4);
    let levels = rng.random_range(2..=5);
    let null_points = rng.random_range(1..=3);
    Ok(linear_scenario(kind, x_dim, b_dim, levels, null_points, rng.random())?)
}

fn bound_sandwich(rng: &mut ChaCha8Rng) -> Result<f64> {
    let sc = random_linear(rng, ScenarioKind::Balancing)?;
    let mut dev = 0.0f64;
    for metric in [Discrepancy::LinearMmd, Discrepancy::Wass] {
        let cov = covariate_imbalance(&sc.joint, metric)?;
        let s = score_imbalance(&sc.joint, metric)?;
        let r = linear_bounds(&sc.w, s, metric)?;
        dev = dev.max(outside(cov, r.lower, r.upper));
    }
    Ok(dev)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

/// Positive when the lower bound exceeds the true imbalance by more than rounding.
fn lower_bound(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.random_range(1..=5);
    let b = rng.random_range(1..=5);
    let nt = rng.random_range(2..=20);
    let nc = rng.random_range(2..=20);
    let shift: f64 = rng.random_range(0.0..1.5);
    let mut treated = gaussian(rng, nt, d);
    treated.data_mut().iter_mut().for_each(|v| *v += shift);
    let pair = EmpiricalPair::new(treated, gaussian(rng, nc, d))?;
    let w = gaussian(rng, b, d);
    let scored = pair.map_linear(&w, None)?;
    let mut dev = 0.0f64;
    for metric in [Discrepancy::LinearMmd, Discrepancy::Wass] {
        let truth = discrepancy(&pair, metric)?;
        let r = linear_bounds(&w, discrepancy(&scored, metric)?, metric)?;
        let slack = 1e-12 * truth.max(1.0);
        dev = dev.max(r.lower - truth - slack);
    }
    Ok(dev.max(0.0))
}

fn corrected(rng: &mut ChaCha8Rng) -> Result<f64> {
    let perturbation = rng.random_range(0.05..0.45);
    let sc = random_linear(rng, ScenarioKind::NonBalancing { perturbation })?;
    let gap = conditional_independence_gap(&sc.joint)?;
    let mut dev = 0.0f64;
    for metric in [Discrepancy::Tv, Discrepancy::LinearMmd, Discrepancy::Wass] {
        let cov = match metric {
            Discrepancy::Tv => tv_discrete(&sc.joint, false),
            m => covariate_imbalance(&sc.joint, m)?,
        };
        let base = match metric {
            Discrepancy::Tv => tv_bounds(tv_discrete(&sc.joint, true))?,
            m => linear_bounds(&sc.w, score_imbalance(&sc.joint, m)?, m)?,
        };
        let (e1, e0) = gap.expected(metric);
        let r = corrected_bounds(&base, e1, e0)?;
        dev = dev.max(outside(cov, r.lower, r.upper));
    }
    Ok(dev)
}

fn matching_balance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let support = rng.random_range(2..=12);
    let levels = rng.random_range(1..=support);
    let j = discrete_scenario(ScenarioKind::Balancing, support, levels, rng.random())?;
    let matched = match_discrete(&j)?;
    let gap = conditional_independence_gap(&matched)?.max_eps();
    Ok(gap
        .max(tv_discrete(&matched, false))
        .max(tv_discrete(&matched, true)))
}

fn layered(rng: &mut ChaCha8Rng) -> Result<f64> {
    let support = rng.random_range(4..=16);
    let inner = rng.random_range(2..=support);
    let l = layered_scenario(support, inner, rng.random())?;
    Ok(conditional_independence_gap(&l.b1)?
        .max_eps()
        .max(conditional_independence_gap(&l.b2)?.max_eps()))
}

fn ot_bruteforce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=6);
    let d = rng.random_range(1..=4);
    let pair = EmpiricalPair::new(gaussian(rng, n, d), gaussian(rng, n, d))?;
    Ok((wasserstein_exact(&pair)? - wasserstein_bruteforce(&pair)?).abs())
}

/// Largest relative error of backprop against central differences.
fn gradient_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.random_range(2..=5);
    let widths = [d, rng.random_range(2..=6), rng.random_range(2..=6), 1];
    let hidden = if rng.random_bool(0.5) {
        ActivationKind::LeakyRelu { slope: 0.1 }
    } else {
        ActivationKind::Sigmoid
    };
    let mut model = Mlp::zeros(&widths, hidden)?;
    let params: Vec<f64> = (0..model.parameter_count())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    model.set_parameters(&params)?;
    let n = rng.random_range(4..=16);
    let x = gaussian(rng, n, d);
    let t: Vec<bool> = (0..n).map(|i| i % 2 == 0 || rng.random_bool(0.3)).collect();
    let wd = if rng.random_bool(0.5) { 0.0 } else { 0.01 };
    let analytic = model.gradient(&x, &t, wd)?.gradients.flatten();
    let numeric = finite_difference_gradient(&model, &x, &t, wd, 1e-5)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max))
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(b)?.max_abs())
}

/// Moore-Penrose conditions, singular value order and norm compatibility.
fn linalg_identities(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = rng.random_range(1..=8);
    let n = rng.random_range(1..=8);
    let a = if rng.random_bool(0.3) {
        let r = rng.random_range(1..=m.min(n));
        gaussian(rng, m, r).matmul(&gaussian(rng, r, n))?
    } else {
        gaussian(rng, m, n)
    };
    let svd = linalg::svd(&a)?;
    let p = linalg::pseudo_inverse(&a, None)?;
    let scale_a = a.max_abs().max(1.0);
    let scale_p = p.max_abs().max(1.0);
    let apa = a.matmul(&p)?.matmul(&a)?;
    let pap = p.matmul(&a)?.matmul(&p)?;
    let ap = a.matmul(&p)?;
    let pa = p.matmul(&a)?;
    let mut dev = [
        max_abs_diff(&apa, &a)? / scale_a,
        max_abs_diff(&pap, &p)? / scale_p,
        max_abs_diff(&ap, &ap.transpose())?,
        max_abs_diff(&pa, &pa.transpose())?,
        max_abs_diff(&svd.reconstruct(), &a)? / scale_a,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let s = &svd.singular_values;
    for pair in s.windows(2) {
        dev = dev.max(pair[1] - pair[0]);
    }
    dev = dev.max(s.iter().map(|v| -v).fold(0.0, f64::max));
    let smax = linalg::operator_norm(&a)?;
    for _ in 0..5 {
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let ax = a.matvec(&x)?;
        dev = dev.max(linalg::norm2(&ax) - smax * linalg::norm2(&x) * (1.0 + 1e-12));
    }
    if let Some((_, smin)) = linalg::singular_extremes(&a, None)? {
        let pnorm = linalg::operator_norm(&p)?;
        dev = dev.max((pnorm - 1.0 / smin).abs() / pnorm.max(1.0));
    }
    Ok(dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn short_runs_pass() {
        for s in Suite::ALL {
            let r = run_suite(s, 5, 3).unwrap();
            assert!(r.passed, "{r}");
        }
        assert!(run_suite(Suite::TvEquality, 0, 0).is_err());
    }

    #[test]
    fn correction_is_needed_somewhere() {
        // the uncorrected upper bound must fail on some non-balancing scenario
        let mut violated = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let perturbation = rng.random_range(0.05..0.45);
            let sc = random_linear(&mut rng, ScenarioKind::NonBalancing { perturbation }).unwrap();
            let tv = tv_discrete(&sc.joint, false) - tv_discrete(&sc.joint, true);
            let s = score_imbalance(&sc.joint, Discrepancy::Wass).unwrap();
            let r = linear_bounds(&sc.w, s, Discrepancy::Wass).unwrap();
            let cov = covariate_imbalance(&sc.joint, Discrepancy::Wass).unwrap();
            if tv > 1e-9 || cov > r.upper + 1e-9 {
                violated += 1;
            }
        }
        assert!(violated > 10, "{violated}");
    }

    #[test]
    fn same_seed_same_report() {
        let a = run_suite(Suite::CorrectedBounds, 10, 9).unwrap();
        let b = run_suite(Suite::CorrectedBounds, 10, 9).unwrap();
        assert_eq!(a.worst_deviation, b.worst_deviation);
    }
}
