use ndarray::{Array2, Axis};

use super::{check_xy, mse, HistoryEntry, NeuralModel, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Momentum SGD settings, derived from a [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdOptions {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl From<&TrainConfig> for SgdOptions {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            decay: cfg.decay,
            batch_size: cfg.batch_size,
            max_epochs: cfg.max_epochs,
            patience: cfg.patience,
        }
    }
}

impl SgdOptions {
    /// Learning rate at (0-based) update step `t`.
    pub fn rate_at(&self, t: usize) -> f64 {
        self.learning_rate / (1.0 + self.decay * t as f64)
    }
}

/// Classical momentum update `v <- mu v + g; w <- w - lr v`.
pub(crate) fn momentum_step(w: &mut [f64], v: &mut [f64], g: &[f64], momentum: f64, lr: f64) {
    for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *vi = momentum * *vi + gi;
        *wi -= lr * *vi;
    }
}

/// Mini-batch SGD with momentum, per-step learning-rate decay, seeded
/// shuffling and dropout masks drawn per batch. One history entry per epoch
/// holding the mean batch MSE (train mode) and the validation MSE; the
/// best-validation parameters are restored at the end.
pub fn train_sgd<M: NeuralModel>(
    model: &mut M,
    train: (&Array2<f64>, &Array2<f64>),
    val: (&Array2<f64>, &Array2<f64>),
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_xy(train.0, train.1, model.n_inputs(), model.n_outputs())?;
    check_xy(val.0, val.1, model.n_inputs(), model.n_outputs())?;
    let opts = SgdOptions::from(cfg);
    let penalty = cfg.penalty();
    let n = train.0.nrows();
    if n == 0 {
        return Err(Error::Validation("empty training set".into()));
    }
    let has_val = val.0.nrows() > 0;
    let mut shuffle_rng = SeededRng::child(cfg.seed, 1);
    let mut dropout_rng = SeededRng::child(cfg.seed, 2);
    let mut w = model.params();
    let mut v = vec![0.0; w.len()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, w.clone());
    let mut fails = 0usize;
    let mut step = 0usize;
    let mut stop_reason = "max epochs reached".to_string();

    for epoch in 1..=opts.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut sum_mse, mut sum_loss, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let xb = train.0.select(Axis(0), chunk);
            let yb = train.1.select(Axis(0), chunk);
            model.set_params(&w);
            let lg = model.loss_grad(&xb, &yb, &penalty, Some(&mut dropout_rng))?;
            if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at epoch {epoch}, update {step}",
                    lg.loss
                )));
            }
            momentum_step(&mut w, &mut v, &lg.grad, opts.momentum, opts.rate_at(step));
            step += 1;
            sum_mse += lg.mse;
            sum_loss += lg.loss;
            batches += 1;
        }
        model.set_params(&w);
        let train_mse = sum_mse / batches as f64;
        let val_mse = if has_val {
            mse(&model.predict(val.0)?, val.1)
        } else {
            train_mse
        };
        history.push(HistoryEntry {
            step: epoch,
            train_mse,
            train_loss: sum_loss / batches as f64,
            val_mse,
        });
        log::debug!("epoch {epoch}: train mse {train_mse:.6e}, val mse {val_mse:.6e}");
        if val_mse < best.0 {
            best = (val_mse, epoch, w.clone());
            fails = 0;
        } else {
            fails += 1;
            if fails > opts.patience {
                stop_reason = "validation patience exhausted".into();
                break;
            }
        }
    }
    if best.0.is_finite() {
        model.set_params(&best.2);
    }
    Ok(TrainOutcome {
        history,
        best_step: best.1,
        best_val_mse: best.0,
        stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, Mlp};

    #[test]
    fn momentum_velocity_converges_to_geometric_limit() {
        let g = [0.5, -2.0];
        let mut w = [0.0, 0.0];
        let mut v = [0.0, 0.0];
        for _ in 0..500 {
            momentum_step(&mut w, &mut v, &g, 0.9, 0.0);
        }
        assert!((v[0] - 5.0).abs() < 1e-12);
        assert!((v[1] + 20.0).abs() < 1e-12);
        assert_eq!(w, [0.0, 0.0]);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut rng = SeededRng::new(0);
        let x = Array2::from_shape_fn((40, 3), |_| rng.uniform());
        let y = Array2::from_shape_fn((40, 2), |_| rng.uniform());
        let mut m = Mlp::new(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let before = m.params();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        train_sgd(&mut m, (&x, &y), (&x, &y), &cfg).unwrap();
        assert_eq!(m.params(), before);
    }

    #[test]
    fn decay_schedule() {
        let o = SgdOptions::from(&TrainConfig::default());
        assert_eq!(o.rate_at(0), 0.001);
        assert!((o.rate_at(10_000) - 0.0005).abs() < 1e-15);
    }
}
