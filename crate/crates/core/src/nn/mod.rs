//! Feed-forward propensity networks `e(x) = f_L(...f_1(x))`.
//!
//! Layer `l` computes `z_l = W_l a_{l-1} + b_l` and `a_l = h_l(z_l)`. The
//! pre-activation `z_l` is the layer-`l` balancing score; the last layer has a
//! single sigmoid unit whose output is the propensity estimate.

mod backprop;
pub mod io;
mod train;

pub use backprop::{finite_difference_gradient, GradientOutput, Gradients};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{dot, Matrix};

/// Leaky ReLU slope used by [`default_architecture`].
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Identity,
    /// `h(z) = z` for `z >= 0`, `slope * z` otherwise; `slope` in `(0, 1)`.
    LeakyRelu { slope: f64 },
    Sigmoid,
}

impl ActivationKind {
    pub fn leaky_relu(slope: f64) -> Result<Self> {
        let kind = ActivationKind::LeakyRelu { slope };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::LeakyRelu { slope } if !(slope > 0.0 && slope < 1.0) => Err(invalid(
                format!("leaky relu slope must lie in (0, 1), got {slope}"),
            )),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            ActivationKind::Identity => z,
            ActivationKind::LeakyRelu { slope } => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            ActivationKind::Sigmoid => sigmoid(z),
        }
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            ActivationKind::Identity => 1.0,
            ActivationKind::LeakyRelu { slope } => {
                if z >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit, `-t ln s(z) - (1-t) ln(1 - s(z))`, without forming `s(z)`.
#[inline]
pub fn bce_from_logit(z: f64, label: bool) -> f64 {
    let t = if label { 1.0 } else { 0.0 };
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out_dim x in_dim`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: ActivationKind,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: ActivationKind) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(shape(format!(
                "bias of length {} for a {}x{} weight matrix",
                bias.len(),
                weights.rows(),
                weights.cols()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer bias".into()));
        }
        activation.validate()?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: ActivationKind) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    /// `W a + b` for every row `a` of `input`.
    pub(crate) fn affine_batch(&self, input: &Matrix) -> Matrix {
        let out = self.out_dim();
        let mut z = Matrix::zeros(input.rows(), out);
        for r in 0..input.rows() {
            let a = input.row(r);
            let zr = z.row_mut(r);
            for (o, zo) in zr.iter_mut().enumerate() {
                *zo = self.bias[o] + dot(self.weights.row(o), a);
            }
        }
        z
    }

    pub(crate) fn activate(&self, z: &Matrix) -> Matrix {
        let act = self.activation;
        let mut a = z.clone();
        for r in 0..a.rows() {
            for v in a.row_mut(r) {
                *v = act.apply(*v);
            }
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Layer dimensions must chain and the last layer must be a single sigmoid unit.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("a network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    l + 1,
                    pair[0].out_dim(),
                    l + 2,
                    pair[1].in_dim()
                )));
            }
        }
        let last = layers.last().unwrap();
        if last.out_dim() != 1 || last.activation != ActivationKind::Sigmoid {
            return Err(invalid(
                "the final layer must have one output with a sigmoid activation",
            ));
        }
        for layer in &layers {
            layer.activation.validate()?;
        }
        Ok(Self { layers })
    }

    /// Zero-initialised network with the given widths; `widths[0]` is the input dimension.
    pub fn zeros(widths: &[usize], hidden: ActivationKind) -> Result<Self> {
        if widths.len() < 2 || *widths.last().unwrap() != 1 {
            return Err(invalid("widths must list the input dim, hidden widths and a final 1"));
        }
        if widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n {
                    ActivationKind::Sigmoid
                } else {
                    hidden
                };
                DenseLayer::zeros(widths[l], widths[l + 1], act)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::parameter_count).sum()
    }

    /// Uniform Glorot initialisation `U(-r, r)`, `r = sqrt(6 / (fan_in + fan_out))`; biases zero.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let (out, inp) = layer.weights.shape();
            let r = (6.0 / (inp + out) as f64).sqrt();
            layer.weights = Matrix::from_fn(out, inp, |_, _| rng.random_range(-r..r));
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let (out, inp) = layer.weights.shape();
            let nw = out * inp;
            layer.weights = Matrix::new(out, inp, params[offset..offset + nw].to_vec())?;
            offset += nw;
            layer.bias.copy_from_slice(&params[offset..offset + out]);
            offset += out;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(shape(format!(
                "network expects {} covariates, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Affine output of layer `layer_index` (1-based) before its activation.
    pub fn pre_activation(&self, x: &[f64], layer_index: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_layer_index(layer_index)?;
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for (l, layer) in self.layers[..layer_index].iter().enumerate() {
            z = (0..layer.out_dim())
                .map(|o| layer.bias[o] + dot(layer.weights.row(o), &a))
                .collect();
            if l + 1 < layer_index {
                a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            }
        }
        Ok(z)
    }

    /// Propensity estimate: sigmoid of the final pre-activation.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let logit = self.pre_activation(x, self.depth())?;
        Ok(sigmoid(logit[0]))
    }

    fn check_layer_index(&self, layer_index: usize) -> Result<()> {
        if layer_index == 0 || layer_index > self.depth() {
            return Err(invalid(format!(
                "layer index {layer_index} outside 1..={}",
                self.depth()
            )));
        }
        Ok(())
    }

    /// Row-wise [`Mlp::pre_activation`].
    pub fn pre_activation_batch(&self, x: &Matrix, layer_index: usize) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(shape(format!(
                "network expects {} covariates, got a {}x{} matrix",
                self.input_dim(),
                x.rows(),
                x.cols()
            )));
        }
        self.check_layer_index(layer_index)?;
        let mut a = x.clone();
        let mut z = Matrix::zeros(0, 0);
        for (l, layer) in self.layers[..layer_index].iter().enumerate() {
            z = layer.affine_batch(&a);
            if l + 1 < layer_index {
                a = layer.activate(&z);
            }
        }
        Ok(z)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.pre_activation_batch(x, self.depth())?.into_data())
    }

    /// Row-wise [`Mlp::forward`].
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Mean binary cross-entropy over a labelled batch.
    pub fn bce(&self, x: &Matrix, t: &[bool]) -> Result<f64> {
        if t.len() != x.rows() {
            return Err(shape(format!("{} labels for {} rows", t.len(), x.rows())));
        }
        if t.is_empty() {
            return Err(invalid("empty batch"));
        }
        let logits = self.logits(x)?;
        Ok(logits
            .iter()
            .zip(t)
            .map(|(&z, &label)| bce_from_logit(z, label))
            .sum::<f64>()
            / t.len() as f64)
    }
}

/// `[input_dim -> 5 -> 100 -> 100 -> 1]`, leaky ReLU on hidden layers, sigmoid head; zero weights.
pub fn default_architecture(input_dim: usize) -> Result<Mlp> {
    if input_dim == 0 {
        return Err(invalid("input dimension must be at least 1"));
    }
    Mlp::zeros(
        &[input_dim, 5, 100, 100, 1],
        ActivationKind::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        },
    )
}

/// Single sigmoid unit: logistic regression.
pub fn logistic_regression(input_dim: usize) -> Result<Mlp> {
    Mlp::zeros(&[input_dim, 1], ActivationKind::Identity)
}
