use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_xy, L2Penalty, LossGrad, NeuralModel};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Linear => {}
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    /// `(out, in)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Dense feed-forward network with a shared hidden activation and a linear
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    layers: Vec<Dense>,
}

impl Mlp {
    /// Seeded fan-in uniform initialization, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`
    /// weights and zero biases.
    pub fn new(sizes: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Validation(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = SeededRng::new(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (3.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    rng.uniform_range(-limit, limit)
                });
                Dense {
                    w: weights,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            layers,
        })
    }

    /// The default surrogate: 144-100-100-5, tanh hidden units.
    pub fn default_surrogate(n_inputs: usize, seed: u64) -> Result<Self> {
        Self::new(&[n_inputs, 100, 100, 5], Activation::Tanh, seed)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    /// Per-layer `(W, b)` as flat row-major arrays, in layer order.
    pub fn layer_arrays(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.iter().copied().collect(), l.b.to_vec()])
            .collect()
    }

    pub fn from_layer_arrays(sizes: &[usize], hidden: Activation, arrays: &[Vec<f64>]) -> Result<Self> {
        let mut model = Self::new(sizes, hidden, 0)?;
        if arrays.len() != 2 * model.layers.len() {
            return Err(Error::Shape(format!(
                "expected {} weight arrays, got {}",
                2 * model.layers.len(),
                arrays.len()
            )));
        }
        for (k, layer) in model.layers.iter_mut().enumerate() {
            let (w, b) = (&arrays[2 * k], &arrays[2 * k + 1]);
            if w.len() != layer.w.len() || b.len() != layer.b.len() {
                return Err(Error::Shape(format!("layer {k} array sizes do not match")));
            }
            layer.w = Array2::from_shape_vec(layer.w.dim(), w.clone()).expect("checked length");
            layer.b = Array1::from(b.clone());
        }
        Ok(model)
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Linear
        } else {
            self.hidden
        }
    }

    /// Activations of every layer, input first.
    fn forward_all(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = acts[k].dot(&layer.w.t());
            z += &layer.b;
            self.activation(k).apply(&mut z);
            acts.push(z);
        }
        acts
    }
}

impl NeuralModel for Mlp {
    fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params(), "parameter count mismatch");
        let mut off = 0;
        for l in &mut self.layers {
            for (dst, src) in l.w.iter_mut().zip(&params[off..]) {
                *dst = *src;
            }
            off += l.w.len();
            for (dst, src) in l.b.iter_mut().zip(&params[off..]) {
                *dst = *src;
            }
            off += l.b.len();
        }
    }

    fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(std::iter::repeat_n(true, l.w.len()));
            out.extend(std::iter::repeat_n(false, l.b.len()));
        }
        out
    }

    fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_inputs() {
            return Err(Error::Shape(format!(
                "MLP expects {} inputs, got {}",
                self.n_inputs(),
                x.ncols()
            )));
        }
        Ok(self.forward_all(x).pop().expect("at least one layer"))
    }

    fn loss_grad(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        penalty: &L2Penalty,
        _dropout: Option<&mut SeededRng>,
    ) -> Result<LossGrad> {
        check_xy(x, y, self.n_inputs(), self.n_outputs())?;
        let acts = self.forward_all(x);
        let out = acts.last().unwrap();
        let n = out.len().max(1) as f64;
        let diff = out - y;
        let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;

        // delta = dL/dz for the current layer.
        let mut delta = diff * (2.0 / n);
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let gw = delta.t().dot(&acts[k]);
            let gb = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut back = delta.dot(&self.layers[k].w);
                let act = self.activation(k - 1);
                back.zip_mut_with(&acts[k], |d, &a| *d *= act.derivative_from_output(a));
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        let mut grad = Vec::with_capacity(self.n_params());
        for (gw, gb) in &grads {
            grad.extend(gw.iter());
            grad.extend(gb.iter());
        }
        let params = self.params();
        let pen = penalty.apply(&params, &self.weight_mask(), &mut grad);
        Ok(LossGrad {
            mse,
            loss: mse + pen,
            grad,
        })
    }
}
