//! Small, dependency-light neural regression framework.
//!
//! Three model families share one training surface:
//!
//! * [`Mlp`]: dense tanh network, trained full-batch with [`train_scg`].
//! * [`Cnn`]: 3x3 valid convolutions with ReLU, max pooling and inverted
//!   dropout, trained with momentum SGD ([`train_sgd`]).
//! * [`Rbf`]: Gaussian radial-basis network grown greedily by [`train_rbf`].
//!
//! The objective is `MSE + lambda * penalty(w)` where the penalty is the sum
//! of squared weights (biases excluded), optionally divided by the weight
//! count. All arithmetic is `f64`; batched products go through `ndarray`.

mod cnn;
mod gradcheck;
mod io;
mod mlp;
mod rbf;
mod scg;
mod sgd;

pub use cnn::{Cnn, CnnArch, DropoutMasks};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use io::{load_model, save_model, ModelContext, ModelFile, SurrogateModel, TrainMeta, MODEL_FORMAT_VERSION};
pub use mlp::{Activation, Mlp};
pub use rbf::{train_rbf, Rbf, RbfConfig, RbfFit};
pub use scg::{scg_minimize, Control, Objective, ScgOptions, ScgResult, ScgStop};
pub use sgd::{train_sgd, SgdOptions};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// How the L2 term is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Mode {
    /// `lambda * sum(w^2)`.
    Sum,
    /// `lambda * sum(w^2) / n_weights`.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Penalty {
    pub lambda: f64,
    pub mode: L2Mode,
}

impl L2Penalty {
    pub fn none() -> Self {
        Self {
            lambda: 0.0,
            mode: L2Mode::Sum,
        }
    }

    pub fn sum(lambda: f64) -> Self {
        Self {
            lambda,
            mode: L2Mode::Sum,
        }
    }

    /// Scale `c` with penalty `c * sum(w^2)`.
    fn coefficient(&self, n_weights: usize) -> f64 {
        match self.mode {
            L2Mode::Sum => self.lambda,
            L2Mode::Mean => self.lambda / n_weights.max(1) as f64,
        }
    }

    /// Penalty value alone.
    pub fn value(&self, params: &[f64], is_weight: &[bool]) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let n_w = is_weight.iter().filter(|&&w| w).count();
        let sq: f64 = params
            .iter()
            .zip(is_weight)
            .filter(|(_, &w)| w)
            .map(|(p, _)| p * p)
            .sum();
        self.coefficient(n_w) * sq
    }

    /// Adds the penalty to `loss` and `2 c w` to `grad` for every weight
    /// entry flagged in `is_weight`.
    pub(crate) fn apply(&self, params: &[f64], is_weight: &[bool], grad: &mut [f64]) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let n_w = is_weight.iter().filter(|&&w| w).count();
        let c = self.coefficient(n_w);
        let mut sq = 0.0;
        for ((p, &is_w), g) in params.iter().zip(is_weight).zip(grad.iter_mut()) {
            if is_w {
                sq += p * p;
                *g += 2.0 * c * p;
            }
        }
        c * sq
    }
}

/// Loss value, its data-fit part, and the gradient w.r.t. the flat parameters.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub mse: f64,
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Common surface of the gradient-trained models.
pub trait NeuralModel: Clone {
    fn n_inputs(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn n_params(&self) -> usize;
    /// Flat parameter vector in the model's declared order.
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
    /// True for weight entries, false for biases.
    fn weight_mask(&self) -> Vec<bool>;
    /// Inference-mode prediction (dropout disabled).
    fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>>;
    /// Training loss and gradient. With `dropout` set, fresh dropout masks are
    /// drawn from it for this batch.
    fn loss_grad(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        penalty: &L2Penalty,
        dropout: Option<&mut SeededRng>,
    ) -> Result<LossGrad>;
}

/// Mean squared error over all entries.
pub fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n
}

pub(crate) fn check_xy(x: &Array2<f64>, y: &Array2<f64>, n_in: usize, n_out: usize) -> Result<()> {
    if x.ncols() != n_in {
        return Err(Error::Shape(format!("expected {n_in} input columns, got {}", x.ncols())));
    }
    if y.ncols() != n_out || y.nrows() != x.nrows() {
        return Err(Error::Shape(format!(
            "targets {:?} do not match inputs {:?} / {n_out} outputs",
            y.dim(),
            x.dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Scg,
    Sgd,
}

/// Training hyperparameters.
///
/// Table defaults: `l2_lambda = 0.8` (MLP), learning rate 0.001, momentum 0.9
/// and decay 1e-4 (CNN), RBF spread 1 and MSE goal 1e-11. Batch size,
/// iteration caps and patience are toolkit defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub l2_lambda: f64,
    pub l2_mode: L2Mode,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_iterations: usize,
    pub patience: usize,
    pub grad_tol: f64,
    pub mse_goal: f64,
    pub spread: f64,
    pub max_centers: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Scg,
            l2_lambda: 0.8,
            l2_mode: L2Mode::Mean,
            learning_rate: 0.001,
            momentum: 0.9,
            decay: 1e-4,
            batch_size: 32,
            max_epochs: 500,
            max_iterations: 1000,
            patience: 20,
            grad_tol: 1e-8,
            mse_goal: 1e-11,
            spread: 1.0,
            max_centers: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn penalty(&self) -> L2Penalty {
        L2Penalty {
            lambda: self.l2_lambda,
            mode: self.l2_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spread > 0.0) {
            return Err(Error::Validation(format!("spread must be positive, got {}", self.spread)));
        }
        let non_negative = [
            ("l2_lambda", self.l2_lambda),
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("decay", self.decay),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) {
                return Err(Error::Validation(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One row of a training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Iteration (SCG) or epoch (SGD), 1-based.
    pub step: usize,
    pub train_mse: f64,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryEntry>,
    pub best_step: usize,
    pub best_val_mse: f64,
    pub stop_reason: String,
}

impl TrainOutcome {
    pub fn write_history_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,train_mse,train_loss,val_mse")?;
        for h in &self.history {
            writeln!(out, "{},{},{},{}", h.step, h.train_mse, h.train_loss, h.val_mse)?;
        }
        Ok(())
    }
}

/// Full-batch SCG training with validation-based early stopping; the model
/// ends up holding the best-validation parameters.
pub fn train_scg<M: NeuralModel>(
    model: &mut M,
    train: (&Array2<f64>, &Array2<f64>),
    val: (&Array2<f64>, &Array2<f64>),
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let penalty = cfg.penalty();
    check_xy(train.0, train.1, model.n_inputs(), model.n_outputs())?;
    check_xy(val.0, val.1, model.n_inputs(), model.n_outputs())?;
    let has_val = val.0.nrows() > 0;

    struct Full<'a, M: NeuralModel> {
        model: M,
        x: &'a Array2<f64>,
        y: &'a Array2<f64>,
        penalty: L2Penalty,
        last_mse: f64,
        failure: Option<Error>,
    }
    impl<M: NeuralModel> Objective for Full<'_, M> {
        fn dim(&self) -> usize {
            self.model.n_params()
        }
        fn value_grad(&mut self, w: &[f64]) -> (f64, Vec<f64>) {
            self.model.set_params(w);
            match self.model.loss_grad(self.x, self.y, &self.penalty, None) {
                Ok(lg) => {
                    self.last_mse = lg.mse;
                    (lg.loss, lg.grad)
                }
                Err(e) => {
                    self.failure = Some(e);
                    (f64::NAN, vec![0.0; w.len()])
                }
            }
        }
    }

    let mut obj = Full {
        model: model.clone(),
        x: train.0,
        y: train.1,
        penalty,
        last_mse: f64::NAN,
        failure: None,
    };
    let w0 = model.params();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, w0.clone());
    let mut fails = 0usize;
    let mut eval_model = model.clone();
    let mask = model.weight_mask();
    let mut val_error = None;
    let opts = ScgOptions {
        max_iterations: cfg.max_iterations,
        grad_tol: cfg.grad_tol,
        ..ScgOptions::default()
    };
    let result = scg_minimize(&mut obj, &w0, &opts, &mut |it, w, f| {
        eval_model.set_params(w);
        let val_mse = if has_val {
            match eval_model.predict(val.0) {
                Ok(p) => mse(&p, val.1),
                Err(e) => {
                    val_error = Some(e);
                    return Control::Stop;
                }
            }
        } else {
            f
        };
        let train_mse = f - penalty.value(w, &mask);
        history.push(HistoryEntry {
            step: it,
            train_mse,
            train_loss: f,
            val_mse,
        });
        if val_mse < best.0 {
            best = (val_mse, it, w.to_vec());
            fails = 0;
        } else {
            fails += 1;
            if fails > cfg.patience {
                return Control::Stop;
            }
        }
        Control::Continue
    });
    if let Some(e) = obj.failure.take().or(val_error) {
        return Err(e);
    }
    if !result.value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss after {} SCG iterations",
            result.iterations
        )));
    }
    let stop_reason = if fails > cfg.patience {
        "validation patience exhausted".to_string()
    } else {
        format!("{:?}", result.stop)
    };
    if best.0.is_finite() {
        model.set_params(&best.2);
    } else {
        model.set_params(&result.params);
    }
    Ok(TrainOutcome {
        history,
        best_step: best.1,
        best_val_mse: best.0,
        stop_reason,
    })
}
