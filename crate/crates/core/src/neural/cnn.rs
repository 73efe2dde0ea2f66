use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_xy, L2Penalty, LossGrad, NeuralModel};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Architecture descriptor of the convolutional surrogate.
///
/// Each conv block is a `kernel x kernel` valid convolution (stride 1),
/// ReLU, then a `pool x pool` max pool with stride 1. After the last block
/// the feature map is flattened into a ReLU dense layer and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnArch {
    pub in_height: usize,
    pub in_width: usize,
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub fc_units: usize,
    pub n_outputs: usize,
    /// Dropout rate applied to the flattened output of the last conv block.
    pub conv_dropout: f64,
    /// Dropout rate applied after the dense layer.
    pub fc_dropout: f64,
}

impl CnnArch {
    /// 64/32/32 filters, 3x3 kernels, 2x2 stride-1 pooling, 100 dense units,
    /// 5 outputs, dropout 0.2 / 0.25.
    pub fn surrogate(n_rows: usize, n_cols: usize) -> Self {
        Self {
            in_height: n_rows,
            in_width: n_cols,
            filters: vec![64, 32, 32],
            kernel: 3,
            pool: 2,
            fc_units: 100,
            n_outputs: 5,
            conv_dropout: 0.2,
            fc_dropout: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Validation("CNN needs at least one non-empty conv layer".into()));
        }
        if self.kernel == 0 || self.pool == 0 || self.fc_units == 0 || self.n_outputs == 0 {
            return Err(Error::Validation("CNN kernel, pool and layer sizes must be positive".into()));
        }
        for (name, p) in [("conv_dropout", self.conv_dropout), ("fc_dropout", self.fc_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        let (mut h, mut w) = (self.in_height, self.in_width);
        for _ in &self.filters {
            if h < self.kernel + self.pool - 1 || w < self.kernel + self.pool - 1 {
                return Err(Error::Validation(format!(
                    "input {}x{} too small for {} conv blocks",
                    self.in_height,
                    self.in_width,
                    self.filters.len()
                )));
            }
            h = h + 2 - self.kernel - self.pool;
            w = w + 2 - self.kernel - self.pool;
        }
        Ok(())
    }

    /// `(height, width)` after each conv and each pool, in order.
    fn spatial(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let (mut h, mut w) = (self.in_height, self.in_width);
        for _ in &self.filters {
            h = h + 1 - self.kernel;
            w = w + 1 - self.kernel;
            out.push((h, w));
            h = h + 1 - self.pool;
            w = w + 1 - self.pool;
            out.push((h, w));
        }
        out
    }

    pub fn flatten_len(&self) -> usize {
        let (h, w) = *self.spatial().last().expect("validated arch");
        h * w * self.filters.last().unwrap()
    }

    /// Per-sample activation sizes in forward order: every conv output,
    /// every pool output, the flattened features, the dense layer and the
    /// output.
    pub fn activation_sizes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .spatial()
            .iter()
            .enumerate()
            .map(|(k, (h, w))| h * w * self.filters[k / 2])
            .collect();
        out.extend([self.flatten_len(), self.fc_units, self.n_outputs]);
        out
    }
}

/// Inverted-dropout masks for one batch: entries are `0` or `1/(1-p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub conv: Option<Array2<f64>>,
    pub fc: Option<Array2<f64>>,
}

impl DropoutMasks {
    pub fn none() -> Self {
        Self { conv: None, fc: None }
    }

    pub fn draw(arch: &CnnArch, batch: usize, rng: &mut SeededRng) -> Self {
        let mut mask = |p: f64, width: usize| {
            (p > 0.0).then(|| {
                let keep = 1.0 / (1.0 - p);
                Array2::from_shape_fn((batch, width), |_| if rng.uniform() < p { 0.0 } else { keep })
            })
        };
        let conv = mask(arch.conv_dropout, arch.flatten_len());
        let fc = mask(arch.fc_dropout, arch.fc_units);
        Self { conv, fc }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    /// `(filters, kernel * kernel * in_channels)`, columns ordered `(ky, kx, c)`.
    w: Array2<f64>,
    b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    /// `(out, in)`.
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Convolutional surrogate over a single-channel `H x W` state image.
///
/// Activations are kept as `(batch * h * w, channels)` matrices (NHWC order),
/// so every convolution is an im2col product.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    arch: CnnArch,
    convs: Vec<ConvLayer>,
    fc: DenseLayer,
    out: DenseLayer,
}

struct ConvCache {
    cols: Array2<f64>,
    /// Post-ReLU conv output.
    act: Array2<f64>,
    /// For every pooled entry, flat index of the winning input entry.
    argmax: Vec<usize>,
    conv_hw: (usize, usize),
}

struct ForwardCache {
    convs: Vec<ConvCache>,
    /// Flattened features after dropout.
    flat: Array2<f64>,
    /// Dense-layer output after ReLU and dropout.
    hidden: Array2<f64>,
    /// Dense-layer output after ReLU, before dropout.
    hidden_pre_drop: Array2<f64>,
    output: Array2<f64>,
}

fn im2col(x: &Array2<f64>, batch: usize, h: usize, w: usize, k: usize) -> Array2<f64> {
    let c = x.ncols();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let src = x.as_slice().expect("standard layout");
    let width = k * k * c;
    let mut cols = vec![0.0; batch * ho * wo * width];
    let mut row = 0;
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut cols[row * width..(row + 1) * width];
                for ky in 0..k {
                    for kx in 0..k {
                        let s = ((b * h + oy + ky) * w + ox + kx) * c;
                        let d = (ky * k + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
                row += 1;
            }
        }
    }
    Array2::from_shape_vec((batch * ho * wo, width), cols).expect("sized buffer")
}

fn col2im(dcols: &Array2<f64>, batch: usize, h: usize, w: usize, k: usize, c: usize) -> Array2<f64> {
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let width = k * k * c;
    let src = dcols.as_slice().expect("standard layout");
    let mut dx = vec![0.0; batch * h * w * c];
    let mut row = 0;
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let s_row = &src[row * width..(row + 1) * width];
                for ky in 0..k {
                    for kx in 0..k {
                        let d = ((b * h + oy + ky) * w + ox + kx) * c;
                        let s = (ky * k + kx) * c;
                        for ch in 0..c {
                            dx[d + ch] += s_row[s + ch];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Array2::from_shape_vec((batch * h * w, c), dx).expect("sized buffer")
}

/// Stride-1 max pool; ties resolve to the first window entry in row-major
/// order.
fn max_pool(x: &Array2<f64>, batch: usize, h: usize, w: usize, p: usize) -> (Array2<f64>, Vec<usize>) {
    let c = x.ncols();
    let (ho, wo) = (h + 1 - p, w + 1 - p);
    let src = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; batch * ho * wo * c];
    let mut arg = vec![0usize; out.len()];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ((b * ho + oy) * wo + ox) * c;
                for ch in 0..c {
                    let mut best_idx = ((b * h + oy) * w + ox) * c + ch;
                    let mut best = src[best_idx];
                    for py in 0..p {
                        for px in 0..p {
                            let idx = ((b * h + oy + py) * w + ox + px) * c + ch;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o + ch] = best;
                    arg[o + ch] = best_idx;
                }
            }
        }
    }
    (
        Array2::from_shape_vec((batch * ho * wo, c), out).expect("sized buffer"),
        arg,
    )
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

fn uniform_matrix(rows: usize, cols: usize, limit: f64, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.uniform_range(-limit, limit))
}

impl Cnn {
    /// Seeded fan-in uniform initialization: `sqrt(6/fan_in)` bounds for ReLU
    /// layers, `sqrt(3/fan_in)` for the linear output; zero biases.
    pub fn new(arch: CnnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut convs = Vec::with_capacity(arch.filters.len());
        let mut in_c = 1;
        for &f in &arch.filters {
            let fan_in = arch.kernel * arch.kernel * in_c;
            convs.push(ConvLayer {
                w: uniform_matrix(f, fan_in, (6.0 / fan_in as f64).sqrt(), &mut rng),
                b: Array1::zeros(f),
            });
            in_c = f;
        }
        let flat = arch.flatten_len();
        let fc = DenseLayer {
            w: uniform_matrix(arch.fc_units, flat, (6.0 / flat as f64).sqrt(), &mut rng),
            b: Array1::zeros(arch.fc_units),
        };
        let out = DenseLayer {
            w: uniform_matrix(arch.n_outputs, arch.fc_units, (3.0 / arch.fc_units as f64).sqrt(), &mut rng),
            b: Array1::zeros(arch.n_outputs),
        };
        Ok(Self { arch, convs, fc, out })
    }

    pub fn arch(&self) -> &CnnArch {
        &self.arch
    }

    /// Per-layer `(W, b)` flat arrays in declared order.
    pub fn layer_arrays(&self) -> Vec<Vec<f64>> {
        self.params_by_layer()
            .into_iter()
            .flat_map(|(w, b)| [w.iter().copied().collect::<Vec<_>>(), b.to_vec()])
            .collect()
    }

    pub fn from_layer_arrays(arch: CnnArch, arrays: &[Vec<f64>]) -> Result<Self> {
        let mut model = Self::new(arch, 0)?;
        let expected: Vec<usize> = model
            .params_by_layer()
            .iter()
            .flat_map(|(w, b)| [w.len(), b.len()])
            .collect();
        let got: Vec<usize> = arrays.iter().map(Vec::len).collect();
        if got != expected {
            return Err(Error::Shape(format!("CNN weight arrays {got:?} do not match {expected:?}")));
        }
        model.set_params(&arrays.concat());
        Ok(model)
    }

    fn params_by_layer(&self) -> Vec<(&Array2<f64>, &Array1<f64>)> {
        let mut out: Vec<_> = self.convs.iter().map(|l| (&l.w, &l.b)).collect();
        out.push((&self.fc.w, &self.fc.b));
        out.push((&self.out.w, &self.out.b));
        out
    }

    fn params_by_layer_mut(&mut self) -> Vec<(&mut Array2<f64>, &mut Array1<f64>)> {
        let mut out: Vec<_> = self.convs.iter_mut().map(|l| (&mut l.w, &mut l.b)).collect();
        out.push((&mut self.fc.w, &mut self.fc.b));
        out.push((&mut self.out.w, &mut self.out.b));
        out
    }

    fn forward(&self, x: &Array2<f64>, masks: &DropoutMasks) -> ForwardCache {
        let batch = x.nrows();
        let a = &self.arch;
        let (mut h, mut w) = (a.in_height, a.in_width);
        // (batch, h*w) -> (batch*h*w, 1): identical memory order.
        let mut cur = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * h * w, 1))
            .expect("input shape");
        let mut convs = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            let cols = im2col(&cur, batch, h, w, a.kernel);
            let mut z = cols.dot(&layer.w.t());
            z += &layer.b;
            relu_inplace(&mut z);
            let conv_hw = (h + 1 - a.kernel, w + 1 - a.kernel);
            let (pooled, argmax) = max_pool(&z, batch, conv_hw.0, conv_hw.1, a.pool);
            h = conv_hw.0 + 1 - a.pool;
            w = conv_hw.1 + 1 - a.pool;
            convs.push(ConvCache {
                cols,
                act: z,
                argmax,
                conv_hw,
            });
            cur = pooled;
        }
        let flat_len = cur.len() / batch.max(1);
        let mut flat = cur.into_shape_with_order((batch, flat_len)).expect("flatten");
        if let Some(m) = &masks.conv {
            flat *= m;
        }
        let mut hidden = flat.dot(&self.fc.w.t());
        hidden += &self.fc.b;
        relu_inplace(&mut hidden);
        let hidden_pre_drop = hidden.clone();
        if let Some(m) = &masks.fc {
            hidden *= m;
        }
        let mut output = hidden.dot(&self.out.w.t());
        output += &self.out.b;
        ForwardCache {
            convs,
            flat,
            hidden,
            hidden_pre_drop,
            output,
        }
    }

    /// Forward pass with explicit dropout masks (training mode).
    pub fn forward_with_masks(&self, x: &Array2<f64>, masks: &DropoutMasks) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.forward(x, masks).output)
    }

    /// Per-sample sizes of every intermediate activation, measured on an
    /// actual forward pass of `x`.
    pub fn probe_activation_sizes(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        self.check_input(x)?;
        let batch = x.nrows().max(1);
        let cache = self.forward(x, &DropoutMasks::none());
        let mut sizes = Vec::new();
        for c in &cache.convs {
            sizes.push(c.act.len() / batch);
            let (h, w) = (c.conv_hw.0 + 1 - self.arch.pool, c.conv_hw.1 + 1 - self.arch.pool);
            sizes.push(h * w * c.act.ncols());
        }
        sizes.extend([
            cache.flat.len() / batch,
            cache.hidden.len() / batch,
            cache.output.len() / batch,
        ]);
        Ok(sizes)
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        let expected = self.arch.in_height * self.arch.in_width;
        if x.ncols() != expected {
            return Err(Error::Shape(format!(
                "CNN expects {}x{}x1 inputs ({expected} values), got {}",
                self.arch.in_height,
                self.arch.in_width,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Loss and gradient under fixed dropout masks.
    pub fn loss_grad_with_masks(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        penalty: &L2Penalty,
        masks: &DropoutMasks,
    ) -> Result<LossGrad> {
        check_xy(x, y, self.n_inputs(), self.n_outputs())?;
        let batch = x.nrows();
        let a = &self.arch;
        let cache = self.forward(x, masks);
        let n = cache.output.len().max(1) as f64;
        let diff = &cache.output - y;
        let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;

        let d_out = diff * (2.0 / n);
        let g_out_w = d_out.t().dot(&cache.hidden);
        let g_out_b = d_out.sum_axis(Axis(0));
        let mut d_hidden = d_out.dot(&self.out.w);
        if let Some(m) = &masks.fc {
            d_hidden *= m;
        }
        d_hidden.zip_mut_with(&cache.hidden_pre_drop, |d, &v| {
            if v <= 0.0 {
                *d = 0.0
            }
        });
        let g_fc_w = d_hidden.t().dot(&cache.flat);
        let g_fc_b = d_hidden.sum_axis(Axis(0));
        let mut d_flat = d_hidden.dot(&self.fc.w);
        if let Some(m) = &masks.conv {
            d_flat *= m;
        }

        let mut conv_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.convs.len());
        let mut d_pooled: Vec<f64> = d_flat.into_raw_vec_and_offset().0;
        for k in (0..self.convs.len()).rev() {
            let c = &cache.convs[k];
            let mut d_act = Array2::<f64>::zeros(c.act.dim());
            {
                let d = d_act.as_slice_mut().expect("fresh array");
                for (g, &idx) in d_pooled.iter().zip(&c.argmax) {
                    d[idx] += g;
                }
            }
            d_act.zip_mut_with(&c.act, |d, &v| {
                if v <= 0.0 {
                    *d = 0.0
                }
            });
            conv_grads.push((d_act.t().dot(&c.cols), d_act.sum_axis(Axis(0))));
            if k > 0 {
                let dcols = d_act.dot(&self.convs[k].w);
                let (h, w) = (c.conv_hw.0 + a.kernel - 1, c.conv_hw.1 + a.kernel - 1);
                let in_c = self.convs[k - 1].w.nrows();
                d_pooled = col2im(&dcols, batch, h, w, a.kernel, in_c).into_raw_vec_and_offset().0;
            }
        }
        conv_grads.reverse();

        let mut grad = Vec::with_capacity(self.n_params());
        for (gw, gb) in conv_grads
            .iter()
            .map(|(w, b)| (w.view(), b))
            .chain([(g_fc_w.view(), &g_fc_b), (g_out_w.view(), &g_out_b)])
        {
            push_layer(&mut grad, gw, gb);
        }
        let pen = penalty.apply(&self.params(), &self.weight_mask(), &mut grad);
        Ok(LossGrad {
            mse,
            loss: mse + pen,
            grad,
        })
    }
}

fn push_layer(out: &mut Vec<f64>, w: ArrayView2<f64>, b: &Array1<f64>) {
    out.extend(w.iter());
    out.extend(b.iter());
}

impl NeuralModel for Cnn {
    fn n_inputs(&self) -> usize {
        self.arch.in_height * self.arch.in_width
    }

    fn n_outputs(&self) -> usize {
        self.arch.n_outputs
    }

    fn n_params(&self) -> usize {
        self.params_by_layer().iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.params_by_layer() {
            push_layer(&mut out, w.view(), b);
        }
        out
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params(), "parameter count mismatch");
        let mut off = 0;
        for (w, b) in self.params_by_layer_mut() {
            for dst in w.iter_mut().chain(b.iter_mut()) {
                *dst = params[off];
                off += 1;
            }
        }
    }

    fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.params_by_layer() {
            out.extend(std::iter::repeat_n(true, w.len()));
            out.extend(std::iter::repeat_n(false, b.len()));
        }
        out
    }

    fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_with_masks(x, &DropoutMasks::none())
    }

    fn loss_grad(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        penalty: &L2Penalty,
        dropout: Option<&mut SeededRng>,
    ) -> Result<LossGrad> {
        let masks = match dropout {
            Some(rng) => DropoutMasks::draw(&self.arch, x.nrows(), rng),
            None => DropoutMasks::none(),
        };
        self.loss_grad_with_masks(x, y, penalty, &masks)
    }
}
