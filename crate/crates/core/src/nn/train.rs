use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Mlp;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};

fn default_learning_rate() -> f64 {
    1e-2
}
fn default_weight_decay() -> f64 {
    1e-2
}
fn default_batch_size() -> usize {
    100
}
fn default_max_epochs() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    #[serde(default)]
    pub early_stopping_patience: Option<usize>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            early_stopping_patience: None,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.early_stopping_patience == Some(0) {
            return Err(invalid("early stopping patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    /// Entry 0 holds the losses before any update.
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn both_classes(ds: &Dataset) -> bool {
    ds.t.iter().any(|&t| t) && ds.t.iter().any(|&t| !t)
}

/// Mini-batch SGD on mean BCE with L2 weight decay, starting from `model`'s current parameters.
///
/// With a patience set, the parameters with the lowest validation loss are returned.
pub fn train(
    model: &Mlp,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid("empty training set"));
    }
    if !both_classes(train_set) {
        return Err(Error::Degenerate(
            "training labels contain a single class".into(),
        ));
    }
    if cfg.early_stopping_patience.is_some() && val_set.is_none() {
        return Err(invalid("early stopping needs a validation set"));
    }
    if let Some(v) = val_set {
        if v.is_empty() {
            return Err(invalid("empty validation set"));
        }
    }

    let mut model = model.clone();
    let losses = |m: &Mlp, epoch: usize| -> Result<EpochRecord> {
        let train_loss = m.bce(&train_set.x, &train_set.t)?;
        let val_loss = val_set.map(|v| m.bce(&v.x, &v.t)).transpose()?;
        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        Ok(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        })
    };

    let mut history = vec![losses(&model, 0)?];
    let mut best = (0usize, history[0].val_loss.unwrap_or(f64::INFINITY), model.clone());
    let mut since_best = 0usize;
    let mut stopped_early = false;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut params = model.parameters();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = train_set.x.select_rows(chunk);
            let tb: Vec<bool> = chunk.iter().map(|&i| train_set.t[i]).collect();
            let g = model.gradient(&xb, &tb, cfg.weight_decay)?;
            if !g.objective.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            for (p, d) in params.iter_mut().zip(g.gradients.flatten()) {
                *p -= cfg.learning_rate * d;
            }
            model
                .set_parameters(&params)
                .map_err(|_| Error::Divergence { epoch })?;
        }
        let record = losses(&model, epoch)?;
        history.push(record);

        if let Some(patience) = cfg.early_stopping_patience {
            let v = record.val_loss.expect("validation set present");
            if v < best.1 {
                best = (epoch, v, model.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (best_epoch, model) = if cfg.early_stopping_patience.is_some() {
        (best.0, best.2)
    } else {
        (history.len() - 1, model)
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{default_architecture, logistic_regression, sigmoid, ActivationKind, Mlp};

    fn separable() -> Dataset {
        let mut rows = Vec::new();
        let mut t = Vec::new();
        for i in 0..20 {
            let a = i as f64 / 10.0;
            let treated = i % 2 == 0;
            let off = if treated { 1.0 } else { -1.0 };
            rows.push(vec![a - 1.0, off + 0.3 * (a - 1.0)]);
            t.push(treated);
        }
        let n = rows.len();
        Dataset::new(Matrix::from_rows(&rows).unwrap(), t, vec![0.0; n]).unwrap()
    }

    #[test]
    fn separable_toy_set_reaches_low_loss() {
        let ds = separable();
        let mut m = Mlp::zeros(&[2, 1], ActivationKind::Identity).unwrap();
        m.initialize(1);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            weight_decay: 0.0,
            batch_size: 5,
            max_epochs: 200,
            ..TrainConfig::default()
        };
        let out = train(&m, &ds, None, &cfg).unwrap();
        assert_eq!(out.history.len(), 201);
        assert!(out.history.last().unwrap().train_loss < 0.1);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let ds = separable();
        let mut m = default_architecture(2).unwrap();
        m.initialize(9);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let out = train(&m, &ds, None, &cfg).unwrap();
        assert_eq!(out.model, m);
        let first = out.history[0].train_loss;
        assert!(out.history.iter().all(|r| r.train_loss == first));
    }

    #[test]
    fn single_step_matches_hand_update() {
        let ds = Dataset::new(Matrix::from_rows(&[vec![2.0]]).unwrap(), vec![true], vec![0.0])
            .unwrap();
        let both = ds
            .concat(
                &Dataset::new(Matrix::from_rows(&[vec![-1.0]]).unwrap(), vec![false], vec![0.0])
                    .unwrap(),
            )
            .unwrap();
        let one = both.subset(&[0]);
        let mut m = logistic_regression(1).unwrap();
        m.set_parameters(&[0.3, -0.2]).unwrap();
        let lr = 0.1;
        let wd = 0.01;
        let g = m.gradient(&one.x, &one.t, wd).unwrap().gradients.flatten();
        let s = sigmoid(0.3 * 2.0 - 0.2);
        let hand_w = (s - 1.0) * 2.0 + wd * 0.3;
        let hand_b = (s - 1.0) + wd * -0.2;
        assert!((g[0] - hand_w).abs() < 1e-15 && (g[1] - hand_b).abs() < 1e-15);

        // a single-class set cannot be trained on, so take one full-batch step over both rows
        let cfg = TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            batch_size: 2,
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(&m, &both, None, &cfg).unwrap();
        let s2 = sigmoid(0.3 * -1.0 - 0.2);
        let gw = ((s - 1.0) * 2.0 + s2 * -1.0) / 2.0 + wd * 0.3;
        let gb = ((s - 1.0) + s2) / 2.0 + wd * -0.2;
        let p = out.model.parameters();
        assert!((p[0] - (0.3 - lr * gw)).abs() < 1e-15);
        assert!((p[1] - (-0.2 - lr * gb)).abs() < 1e-15);
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = separable();
        let mut m = default_architecture(2).unwrap();
        m.initialize(4);
        let cfg = TrainConfig {
            max_epochs: 10,
            batch_size: 3,
            rng_seed: 17,
            ..TrainConfig::default()
        };
        let a = train(&m, &ds, None, &cfg).unwrap();
        let b = train(&m, &ds, None, &cfg).unwrap();
        let bits = |m: &Mlp| m.parameters().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.model), bits(&b.model));
    }

    #[test]
    fn early_stopping_restores_best_checkpoint() {
        let ds = separable();
        let val = ds.subset(&[0, 1, 2, 3]);
        let mut m = default_architecture(2).unwrap();
        m.initialize(2);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            max_epochs: 300,
            batch_size: 4,
            early_stopping_patience: Some(3),
            weight_decay: 0.0,
            rng_seed: 1,
        };
        let out = train(&m, &ds, Some(&val), &cfg).unwrap();
        let best = out
            .history
            .iter()
            .min_by(|a, b| a.val_loss.unwrap().total_cmp(&b.val_loss.unwrap()))
            .unwrap();
        assert_eq!(out.best_epoch, best.epoch);
        let v = out.model.bce(&val.x, &val.t).unwrap();
        assert_eq!(v, best.val_loss.unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = separable();
        let treated = ds.subset(&ds.treated_indices());
        let m = default_architecture(2).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&m, &treated, None, &cfg),
            Err(Error::Degenerate(_))
        ));
        let es = TrainConfig {
            early_stopping_patience: Some(2),
            ..TrainConfig::default()
        };
        assert!(train(&m, &ds, None, &es).is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(&m, &ds, None, &bad).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let ds = separable();
        let mut m = logistic_regression(2).unwrap();
        m.initialize(0);
        let cfg = TrainConfig {
            learning_rate: 1e308,
            weight_decay: 1.0,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        match train(&m, &ds, None, &cfg) {
            Err(Error::Divergence { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
