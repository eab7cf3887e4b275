use super::{bce_from_logit, sigmoid, Mlp};
use crate::error::{invalid, shape, Result};
use crate::linalg::Matrix;

/// Per-layer gradients, laid out like the layers themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    /// Same order as [`Mlp::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .map(Matrix::max_abs)
            .chain(self.bias.iter().flatten().map(|b| b.abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct GradientOutput {
    /// Mean BCE plus `(weight_decay / 2) * ||theta||^2`.
    pub objective: f64,
    pub gradients: Gradients,
}

fn check_batch(model: &Mlp, x: &Matrix, t: &[bool]) -> Result<()> {
    if x.rows() == 0 {
        return Err(invalid("gradient of an empty batch"));
    }
    if t.len() != x.rows() {
        return Err(shape(format!("{} labels for {} rows", t.len(), x.rows())));
    }
    if x.cols() != model.input_dim() {
        return Err(shape(format!(
            "network expects {} covariates, got {}",
            model.input_dim(),
            x.cols()
        )));
    }
    Ok(())
}

fn squared_norm(model: &Mlp) -> f64 {
    model
        .layers()
        .iter()
        .map(|l| {
            l.weights.data().iter().map(|w| w * w).sum::<f64>()
                + l.bias.iter().map(|b| b * b).sum::<f64>()
        })
        .sum()
}

/// The training objective at the current parameters.
pub(crate) fn objective(model: &Mlp, x: &Matrix, t: &[bool], weight_decay: f64) -> Result<f64> {
    check_batch(model, x, t)?;
    Ok(model.bce(x, t)? + 0.5 * weight_decay * squared_norm(model))
}

impl Mlp {
    /// Backpropagated gradient of mean BCE + `(weight_decay / 2) * ||theta||^2`.
    pub fn gradient(&self, x: &Matrix, t: &[bool], weight_decay: f64) -> Result<GradientOutput> {
        check_batch(self, x, t)?;
        let layers = self.layers();
        let depth = layers.len();
        let batch = x.rows();

        // activations[l] is the input of layer l; pre[l] its affine output
        let mut activations = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut a = x.clone();
        for layer in layers {
            let z = layer.affine_batch(&a);
            let next = layer.activate(&z);
            activations.push(a);
            pre.push(z);
            a = next;
        }

        let logits = pre[depth - 1].data();
        let mut loss = 0.0;
        let mut delta = Matrix::zeros(batch, 1);
        for (r, (&z, &label)) in logits.iter().zip(t).enumerate() {
            loss += bce_from_logit(z, label);
            delta[(r, 0)] = (sigmoid(z) - if label { 1.0 } else { 0.0 }) / batch as f64;
        }
        loss /= batch as f64;

        let mut grad_w = vec![Matrix::zeros(0, 0); depth];
        let mut grad_b = vec![Vec::new(); depth];
        for l in (0..depth).rev() {
            let layer = &layers[l];
            let (out, inp) = layer.weights.shape();
            let input = &activations[l];
            let mut gw = Matrix::zeros(out, inp);
            let mut gb = vec![0.0; out];
            for r in 0..batch {
                let d = delta.row(r);
                let a_row = input.row(r);
                for o in 0..out {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    for (g, &av) in gw.row_mut(o).iter_mut().zip(a_row) {
                        *g += dv * av;
                    }
                }
            }
            if weight_decay != 0.0 {
                for (g, &w) in gw.data_mut().iter_mut().zip(layer.weights.data()) {
                    *g += weight_decay * w;
                }
                for (g, &b) in gb.iter_mut().zip(&layer.bias) {
                    *g += weight_decay * b;
                }
            }
            if l > 0 {
                let inner = layers[l - 1].activation;
                let z_prev = &pre[l - 1];
                let mut next = Matrix::zeros(batch, inp);
                for r in 0..batch {
                    let d = delta.row(r);
                    let row = next.row_mut(r);
                    for o in 0..out {
                        let dv = d[o];
                        if dv == 0.0 {
                            continue;
                        }
                        for (n, &w) in row.iter_mut().zip(layer.weights.row(o)) {
                            *n += dv * w;
                        }
                    }
                    for (n, &z) in row.iter_mut().zip(z_prev.row(r)) {
                        *n *= inner.derivative(z);
                    }
                }
                delta = next;
            }
            grad_w[l] = gw;
            grad_b[l] = gb;
        }

        Ok(GradientOutput {
            objective: loss + 0.5 * weight_decay * squared_norm(self),
            gradients: Gradients {
                weights: grad_w,
                bias: grad_b,
            },
        })
    }
}

/// Central differences of the training objective, one parameter at a time.
pub fn finite_difference_gradient(
    model: &Mlp,
    x: &Matrix,
    t: &[bool],
    weight_decay: f64,
    step: f64,
) -> Result<Vec<f64>> {
    let base = model.parameters();
    let mut probe = model.clone();
    let mut params = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        params[i] = base[i] + step;
        probe.set_parameters(&params)?;
        let plus = objective(&probe, x, t, weight_decay)?;
        params[i] = base[i] - step;
        probe.set_parameters(&params)?;
        let minus = objective(&probe, x, t, weight_decay)?;
        params[i] = base[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ActivationKind, DenseLayer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut impl Rng, n: usize, d: usize) -> (Matrix, Vec<bool>) {
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let t = (0..n).map(|i| i % 2 == 0 || rng.random_bool(0.3)).collect();
        (x, t)
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let relu = ActivationKind::LeakyRelu { slope: 0.1 };
        for trial in 0..5 {
            let mut m = Mlp::zeros(&[3, 4, 3, 1], relu).unwrap();
            m.initialize(trial);
            let (x, t) = random_batch(&mut rng, 6, 3);
            let g = m.gradient(&x, &t, 0.01).unwrap().gradients.flatten();
            let fd = finite_difference_gradient(&m, &x, &t, 0.01, 1e-5).unwrap();
            for (a, n) in g.iter().zip(&fd) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-4, "trial {trial}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn saturated_separated_point_has_tiny_gradient() {
        let l = DenseLayer::new(
            Matrix::from_rows(&[vec![40.0]]).unwrap(),
            vec![0.0],
            ActivationKind::Sigmoid,
        )
        .unwrap();
        let m = Mlp::new(vec![l]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let g = m.gradient(&x, &[true, false], 0.0).unwrap();
        assert!(g.gradients.max_abs() < 1e-6);
    }

    #[test]
    fn opposite_labels_at_one_half_cancel_output_bias() {
        let m = crate::nn::default_architecture(2).unwrap();
        let x = Matrix::from_rows(&[vec![0.7, -0.2], vec![0.7, -0.2]]).unwrap();
        let g = m.gradient(&x, &[true, false], 0.0).unwrap();
        assert_eq!(g.gradients.bias[3][0], 0.0);
    }

    #[test]
    fn objective_includes_weight_decay() {
        let mut m = Mlp::zeros(&[2, 1], ActivationKind::Identity).unwrap();
        m.set_parameters(&[1.0, 2.0, 0.5]).unwrap();
        let x = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let out = m.gradient(&x, &[true], 0.1).unwrap();
        let expected = bce_from_logit(0.5, true) + 0.05 * (1.0 + 4.0 + 0.25);
        assert!((out.objective - expected).abs() < 1e-15);
    }
}
