//! Exact discrete optimal transport by successive shortest paths.
//!
//! Sources are treated points, sinks are control points, and the cost of an
//! arc is the Euclidean distance. Each round runs Dijkstra on reduced costs
//! from every source with remaining supply and pushes flow to the nearest
//! sink with remaining demand. The final potentials give a dual solution,
//! which is checked against the primal plan before a value is returned.

use itertools::Itertools;

use super::EmpiricalPair;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

/// Default limit on `N_t * N_c`.
pub const DEFAULT_COST_CAP: usize = 4_000_000;

/// Mass below this is treated as exhausted.
const MASS_EPS: f64 = 1e-14;
const CERT_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct TransportSolution {
    pub cost: f64,
    /// Non-zero entries `(treated, control, mass)` of the optimal plan.
    pub plan: Vec<(usize, usize, f64)>,
    /// Dual variables with `u_i + v_j <= c_ij`.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub max_dual_violation: f64,
    pub max_slackness: f64,
    pub duality_gap: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn cost_matrix(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut c = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        c.extend(b.row_iter().map(|bj| euclid(ai, bj)));
    }
    c
}

pub fn wasserstein_exact(pair: &EmpiricalPair) -> Result<f64> {
    wasserstein_exact_with_cap(pair, DEFAULT_COST_CAP)
}

pub fn wasserstein_exact_with_cap(pair: &EmpiricalPair, cap: usize) -> Result<f64> {
    Ok(transport(pair, cap)?.cost)
}

/// Solves the transport problem and certifies it by the dual.
pub fn transport(pair: &EmpiricalPair, cap: usize) -> Result<TransportSolution> {
    let n = pair.treated().rows();
    let m = pair.control().rows();
    let entries = n.saturating_mul(m);
    if entries > cap {
        return Err(Error::SizeCap { entries, cap });
    }
    let cost = cost_matrix(pair.treated(), pair.control());
    let sol = solve(&cost, n, m, pair.treated_weights(), pair.control_weights());
    let scale = cost.iter().copied().fold(1.0, f64::max);
    let tol = CERT_TOL * scale;
    if sol.max_dual_violation > tol || sol.max_slackness > tol || sol.duality_gap > tol {
        return Err(Error::Certification(format!(
            "dual violation {:.3e}, slackness {:.3e}, gap {:.3e}",
            sol.max_dual_violation, sol.max_slackness, sol.duality_gap
        )));
    }
    Ok(sol)
}

fn solve(cost: &[f64], n: usize, m: usize, a: &[f64], b: &[f64]) -> TransportSolution {
    let c = |i: usize, j: usize| cost[i * m + j];
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0; n * m];
    // node k < n is source k, node n + j is sink j
    let nodes = n + m;
    let mut pot = vec![0.0; nodes];
    let mut dist = vec![f64::INFINITY; nodes];
    let mut done = vec![false; nodes];
    let mut pred = vec![usize::MAX; nodes];

    loop {
        supply.iter_mut().for_each(|s| {
            if *s <= MASS_EPS {
                *s = 0.0
            }
        });
        demand.iter_mut().for_each(|d| {
            if *d <= MASS_EPS {
                *d = 0.0
            }
        });
        if supply.iter().all(|&s| s == 0.0) || demand.iter().all(|&d| d == 0.0) {
            break;
        }

        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        done.iter_mut().for_each(|d| *d = false);
        pred.iter_mut().for_each(|p| *p = usize::MAX);
        for i in 0..n {
            if supply[i] > 0.0 {
                dist[i] = 0.0;
            }
        }
        let mut target = usize::MAX;
        loop {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for k in 0..nodes {
                if !done[k] && dist[k] < best_d {
                    best_d = dist[k];
                    best = k;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best >= n {
                let j = best - n;
                if demand[j] > 0.0 {
                    target = best;
                    break;
                }
                // residual reverse arcs sink j -> source i where flow is positive
                for i in 0..n {
                    if flow[i * m + j] > 0.0 && !done[i] {
                        let rc = (-c(i, j) + pot[best] - pot[i]).max(0.0);
                        let nd = best_d + rc;
                        if nd < dist[i] {
                            dist[i] = nd;
                            pred[i] = best;
                        }
                    }
                }
            } else {
                let i = best;
                for j in 0..m {
                    let k = n + j;
                    if done[k] {
                        continue;
                    }
                    let rc = (c(i, j) + pot[i] - pot[k]).max(0.0);
                    let nd = best_d + rc;
                    if nd < dist[k] {
                        dist[k] = nd;
                        pred[k] = i;
                    }
                }
            }
        }
        debug_assert!(target != usize::MAX, "balanced problem always has a path");
        if target == usize::MAX {
            break;
        }
        let dt = dist[target];
        for k in 0..nodes {
            pot[k] += if done[k] { dist[k].min(dt) } else { dt };
        }

        // bottleneck along the path
        let mut delta = demand[target - n];
        let mut k = target;
        while pred[k] != usize::MAX {
            let p = pred[k];
            if p >= n {
                // arc sink(p) -> source(k) is a reverse arc
                delta = delta.min(flow[k * m + (p - n)]);
            }
            k = p;
        }
        let source = k;
        delta = delta.min(supply[source]);

        let mut k = target;
        while pred[k] != usize::MAX {
            let p = pred[k];
            if p < n {
                flow[p * m + (k - n)] += delta;
            } else {
                let f = &mut flow[k * m + (p - n)];
                *f -= delta;
                if *f <= MASS_EPS {
                    *f = 0.0;
                }
            }
            k = p;
        }
        supply[source] -= delta;
        demand[target - n] -= delta;
    }

    let u: Vec<f64> = (0..n).map(|i| -pot[i]).collect();
    let v: Vec<f64> = (0..m).map(|j| pot[n + j]).collect();
    let mut primal = 0.0;
    let mut max_dual_violation = 0.0f64;
    let mut max_slackness = 0.0f64;
    let mut plan = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let cij = c(i, j);
            let slack = cij - u[i] - v[j];
            max_dual_violation = max_dual_violation.max(-slack);
            let f = flow[i * m + j];
            if f > 0.0 {
                primal += f * cij;
                max_slackness = max_slackness.max(slack.abs());
                plan.push((i, j, f));
            }
        }
    }
    let dual: f64 = a.iter().zip(&u).map(|(w, x)| w * x).sum::<f64>()
        + b.iter().zip(&v).map(|(w, x)| w * x).sum::<f64>();
    TransportSolution {
        cost: primal,
        plan,
        u,
        v,
        max_dual_violation,
        max_slackness,
        duality_gap: (primal - dual).abs(),
    }
}

/// Minimum over all permutations of the mean matched distance; uniform weights, `N_t = N_c <= 7`.
pub fn wasserstein_bruteforce(pair: &EmpiricalPair) -> Result<f64> {
    let n = pair.treated().rows();
    if pair.control().rows() != n {
        return Err(invalid("brute force needs equally many treated and control points"));
    }
    if n > 7 {
        return Err(invalid(format!("brute force limited to 7 points per side, got {n}")));
    }
    let uniform = |w: &[f64]| w.iter().all(|&x| (x - 1.0 / n as f64).abs() < 1e-12);
    if !uniform(pair.treated_weights()) || !uniform(pair.control_weights()) {
        return Err(invalid("brute force needs uniform weights"));
    }
    let cost = cost_matrix(pair.treated(), pair.control());
    let best = (0..n)
        .permutations(n)
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(values: &[f64]) -> Matrix {
        Matrix::new(values.len(), 1, values.to_vec()).unwrap()
    }

    fn random_pair(rng: &mut impl Rng, n: usize, d: usize) -> EmpiricalPair {
        let a = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        EmpiricalPair::new(a, b).unwrap()
    }

    #[test]
    fn small_examples() {
        let p = EmpiricalPair::new(line(&[0.0]), line(&[1.0])).unwrap();
        assert!((wasserstein_exact(&p).unwrap() - 1.0).abs() < 1e-15);
        let p = EmpiricalPair::new(line(&[0.0, 1.0]), line(&[0.0, 1.0])).unwrap();
        assert!(wasserstein_exact(&p).unwrap().abs() < 1e-15);
        let p = EmpiricalPair::new(line(&[0.0, 2.0]), line(&[1.0, 1.0])).unwrap();
        assert!((wasserstein_exact(&p).unwrap() - 1.0).abs() < 1e-15);
        assert!((wasserstein_bruteforce(&p).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn agrees_with_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..200 {
            let n = 1 + trial % 6;
            let d = 1 + trial % 4;
            let p = random_pair(&mut rng, n, d);
            let exact = wasserstein_exact(&p).unwrap();
            let brute = wasserstein_bruteforce(&p).unwrap();
            assert!((exact - brute).abs() < 1e-9, "trial {trial}: {exact} vs {brute}");
        }
    }

    #[test]
    fn unequal_weights_match_one_dimensional_formula() {
        // on the line, W1 equals the integral of |F - G|
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.random_range(1..9);
            let m = rng.random_range(1..9);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let wa: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let wb: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
            let p = EmpiricalPair::weighted(line(&xs), line(&ys), wa, wb).unwrap();
            let mut events: Vec<(f64, f64)> = xs
                .iter()
                .zip(p.treated_weights())
                .map(|(&x, &w)| (x, w))
                .chain(ys.iter().zip(p.control_weights()).map(|(&y, &w)| (y, -w)))
                .collect();
            events.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut cdf = 0.0;
            let mut integral = 0.0;
            for k in 0..events.len() - 1 {
                cdf += events[k].1;
                integral += cdf.abs() * (events[k + 1].0 - events[k].0);
            }
            let exact = wasserstein_exact(&p).unwrap();
            assert!((exact - integral).abs() < 1e-9, "{exact} vs {integral}");
        }
    }

    #[test]
    fn certificate_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::from_fn(30, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(45, 3, |_, _| rng.random_range(-1.0..1.0));
        let p = EmpiricalPair::new(a, b).unwrap();
        let sol = transport(&p, DEFAULT_COST_CAP).unwrap();
        assert!(sol.max_slackness < 1e-9 && sol.duality_gap < 1e-9);
        let shipped: f64 = sol.plan.iter().map(|e| e.2).sum();
        assert!((shipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let pts = |rng: &mut ChaCha8Rng| Matrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let (a, b, c) = (pts(&mut rng), pts(&mut rng), pts(&mut rng));
            let w = |x: &Matrix, y: &Matrix| {
                wasserstein_exact(&EmpiricalPair::new(x.clone(), y.clone()).unwrap()).unwrap()
            };
            assert!((w(&a, &b) - w(&b, &a)).abs() < 1e-9);
            assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-9);
        }
    }

    #[test]
    fn size_cap_enforced() {
        let p = EmpiricalPair::new(line(&[0.0, 1.0, 2.0]), line(&[0.0, 1.0])).unwrap();
        match wasserstein_exact_with_cap(&p, 5) {
            Err(Error::SizeCap { entries, cap }) => assert_eq!((entries, cap), (6, 5)),
            other => panic!("expected size cap error, got {other:?}"),
        }
    }

    #[test]
    fn bruteforce_preconditions() {
        let p = EmpiricalPair::new(line(&[0.0, 1.0]), line(&[0.0])).unwrap();
        assert!(wasserstein_bruteforce(&p).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pair(&mut rng, 1, 3);
        let d = euclid(p.treated().row(0), p.control().row(0));
        assert_eq!(wasserstein_bruteforce(&p).unwrap(), d);
    }
}
