use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_xy, L2Penalty, LossGrad, NeuralModel};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Gaussian radial-basis network: `y = b + sum_k w_k exp(-|x - c_k|^2 / (2 s^2))`.
///
/// Centers and spread are fixed after training; the trainable parameters
/// are the linear output weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Rbf {
    /// `(n_centers, n_inputs)`.
    centers: Array2<f64>,
    spread: f64,
    /// `(n_centers, n_outputs)`.
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl Rbf {
    pub fn new(centers: Array2<f64>, spread: f64, weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if !(spread > 0.0) {
            return Err(Error::Validation(format!("spread must be positive, got {spread}")));
        }
        if weights.nrows() != centers.nrows() || weights.ncols() != bias.len() {
            return Err(Error::Shape(format!(
                "centers {:?}, weights {:?} and bias {} are inconsistent",
                centers.dim(),
                weights.dim(),
                bias.len()
            )));
        }
        Ok(Self {
            centers,
            spread,
            weights,
            bias,
        })
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn n_centers(&self) -> usize {
        self.centers.nrows()
    }

    /// Hidden-layer activations `(n_samples, n_centers)`.
    pub fn basis(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.centers.ncols() {
            return Err(Error::Shape(format!(
                "RBF expects {} inputs, got {}",
                self.centers.ncols(),
                x.ncols()
            )));
        }
        let scale = 1.0 / (2.0 * self.spread * self.spread);
        let xs = x.as_standard_layout();
        let cs = self.centers.as_standard_layout();
        Ok(Array2::from_shape_fn((x.nrows(), self.centers.nrows()), |(i, k)| {
            let xi = xs.row(i);
            let ck = cs.row(k);
            gaussian(xi.as_slice().expect("standard layout"), ck.as_slice().expect("standard layout"), scale)
        }))
    }
}

fn gaussian(x: &[f64], c: &[f64], scale: f64) -> f64 {
    let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 * scale).exp()
}

impl NeuralModel for Rbf {
    fn n_inputs(&self) -> usize {
        self.centers.ncols()
    }

    fn n_outputs(&self) -> usize {
        self.bias.len()
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Output weights (row-major, one row per center) then biases.
    fn params(&self) -> Vec<f64> {
        self.weights.iter().chain(self.bias.iter()).copied().collect()
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params(), "parameter count mismatch");
        for (dst, src) in self.weights.iter_mut().chain(self.bias.iter_mut()).zip(params) {
            *dst = *src;
        }
    }

    fn weight_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.weights.len()];
        m.extend(std::iter::repeat_n(false, self.bias.len()));
        m
    }

    fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = self.basis(x)?.dot(&self.weights);
        out += &self.bias;
        Ok(out)
    }

    fn loss_grad(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        penalty: &L2Penalty,
        _dropout: Option<&mut SeededRng>,
    ) -> Result<LossGrad> {
        check_xy(x, y, self.n_inputs(), self.n_outputs())?;
        let phi = self.basis(x)?;
        let mut out = phi.dot(&self.weights);
        out += &self.bias;
        let n = out.len().max(1) as f64;
        let diff = out - y;
        let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let d = diff * (2.0 / n);
        let gw = phi.t().dot(&d);
        let gb = d.sum_axis(Axis(0));
        let mut grad: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
        let pen = penalty.apply(&self.params(), &self.weight_mask(), &mut grad);
        Ok(LossGrad {
            mse,
            loss: mse + pen,
            grad,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfConfig {
    pub spread: f64,
    pub mse_goal: f64,
    /// Upper bound on centers; `None` allows one per training point.
    pub max_centers: Option<usize>,
    /// Initial ridge added to the normal equations.
    pub ridge: f64,
}

impl Default for RbfConfig {
    fn default() -> Self {
        Self {
            spread: 1.0,
            mse_goal: 1e-11,
            max_centers: None,
            ridge: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfFit {
    pub model: Rbf,
    /// Training MSE after each center count, starting with the bias-only fit.
    pub history: Vec<(usize, f64)>,
    pub train_mse: f64,
    /// Final ridge (larger than the configured one if it had to be bumped).
    pub ridge: f64,
    pub stop_reason: String,
}

/// Incrementally factored ridge normal equations `(A^T A + r I) theta = A^T y`
/// for a growing design matrix `A = [1, phi_1, ..., phi_k]`.
///
/// `q = A L^{-T}` and `z = L^{-1} A^T y` are kept alongside the Cholesky
/// factor so the fitted values `A theta = q z` and hence the residuals can be
/// updated column by column.
struct GrowingLsq {
    ridge: f64,
    /// Design columns, `(n, capacity)`; only the first `k` are used.
    a: Array2<f64>,
    /// Gram matrix `A^T A`, `(capacity, capacity)`.
    gram: Array2<f64>,
    /// Lower-triangular Cholesky factor of `gram + ridge I`.
    l: Array2<f64>,
    q: Array2<f64>,
    /// `(capacity, n_out)`.
    z: Array2<f64>,
    aty: Array2<f64>,
    k: usize,
}

impl GrowingLsq {
    fn new(n: usize, n_out: usize, capacity: usize, ridge: f64) -> Self {
        Self {
            ridge,
            a: Array2::zeros((n, capacity)),
            gram: Array2::zeros((capacity, capacity)),
            l: Array2::zeros((capacity, capacity)),
            q: Array2::zeros((n, capacity)),
            z: Array2::zeros((capacity, n_out)),
            aty: Array2::zeros((capacity, n_out)),
            k: 0,
        }
    }

    /// Appends column `col`; returns false if the factorization needs a
    /// larger ridge.
    fn push(&mut self, col: &Array1<f64>, y: &Array2<f64>) -> bool {
        let k = self.k;
        self.a.column_mut(k).assign(col);
        let g = self.a.slice(s![.., ..=k]).t().dot(col);
        for j in 0..=k {
            self.gram[[k, j]] = g[j];
            self.gram[[j, k]] = g[j];
        }
        self.aty.row_mut(k).assign(&y.t().dot(col));
        self.k += 1;
        self.factor_last()
    }

    /// Extends `l`, `q`, `z` by the last pushed column.
    fn factor_last(&mut self) -> bool {
        let k = self.k - 1;
        // Forward substitution L[..k,..k] l = gram[..k, k].
        let mut lrow = vec![0.0; k];
        for j in 0..k {
            let mut v = self.gram[[k, j]];
            for m in 0..j {
                v -= self.l[[j, m]] * lrow[m];
            }
            lrow[j] = v / self.l[[j, j]];
        }
        let diag2 = self.gram[[k, k]] + self.ridge - lrow.iter().map(|v| v * v).sum::<f64>();
        if !(diag2 > 0.0) {
            return false;
        }
        let diag = diag2.sqrt();
        for (j, v) in lrow.iter().enumerate() {
            self.l[[k, j]] = *v;
        }
        self.l[[k, k]] = diag;
        let mut qk = self.a.column(k).to_owned();
        for (j, v) in lrow.iter().enumerate() {
            qk.scaled_add(-v, &self.q.column(j));
        }
        qk /= diag;
        self.q.column_mut(k).assign(&qk);
        let mut zk = self.aty.row(k).to_owned();
        for (j, v) in lrow.iter().enumerate() {
            zk.scaled_add(-v, &self.z.row(j));
        }
        zk /= diag;
        self.z.row_mut(k).assign(&zk);
        true
    }

    /// Rebuilds the factorization of all current columns with a new ridge.
    fn refactor(&mut self, ridge: f64) -> bool {
        self.ridge = ridge;
        let k = self.k;
        for kk in 1..=k {
            self.k = kk;
            if !self.factor_last() {
                self.k = k;
                return false;
            }
        }
        true
    }

    /// Contribution `q_k z_k^T` of column `k` to the fitted values.
    fn fitted_increment(&self, k: usize) -> Array2<f64> {
        let q = self.q.column(k).insert_axis(Axis(1));
        let z = self.z.row(k).insert_axis(Axis(0));
        q.dot(&z)
    }

    fn fitted(&self) -> Array2<f64> {
        self.q.slice(s![.., ..self.k]).dot(&self.z.slice(s![..self.k, ..]))
    }

    /// Solves `(gram + ridge I) theta = rhs` through the factor.
    fn solve(&self, rhs: &Array2<f64>) -> Array2<f64> {
        let k = self.k;
        let mut t = rhs.clone();
        for i in 0..k {
            for m in 0..i {
                let lim = self.l[[i, m]];
                let (head, mut tail) = t.view_mut().split_at(Axis(0), i);
                tail.row_mut(0).scaled_add(-lim, &head.row(m));
            }
            let d = self.l[[i, i]];
            t.row_mut(i).mapv_inplace(|v| v / d);
        }
        for i in (0..k).rev() {
            for m in i + 1..k {
                let lmi = self.l[[m, i]];
                let (mut head, tail) = t.view_mut().split_at(Axis(0), i + 1);
                head.row_mut(i).scaled_add(-lmi, &tail.row(m - i - 1));
            }
            let d = self.l[[i, i]];
            t.row_mut(i).mapv_inplace(|v| v / d);
        }
        t
    }

    /// Coefficients `theta` with iterated-Tikhonov refinement, which removes
    /// the ridge bias so the fit tends to the exact least-squares solution.
    fn coefficients(&self, y: &Array2<f64>) -> Array2<f64> {
        let a = self.a.slice(s![.., ..self.k]);
        let mut theta = self.solve(&self.aty.slice(s![..self.k, ..]).to_owned());
        let mut best = (mse_of(&(y - &a.dot(&theta))), theta.clone());
        for _ in 0..20 {
            let r = y - &a.dot(&theta);
            theta = &theta + &self.solve(&a.t().dot(&r));
            let m = mse_of(&(y - &a.dot(&theta)));
            if !(m < best.0) {
                break;
            }
            let stalled = m > 0.5 * best.0;
            best = (m, theta.clone());
            if stalled {
                break;
            }
        }
        best.1
    }
}

fn mse_of(r: &Array2<f64>) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>() / r.len().max(1) as f64
}

/// Greedy RBF training.
///
/// Starts from a bias-only model and repeatedly adds a center at the unused
/// training input with the largest residual norm, re-solving the output layer
/// by ridge-regularized least squares, until the training MSE reaches
/// `mse_goal` or the center budget is exhausted. If the normal equations lose
/// positive definiteness the ridge is multiplied by 10 (with a warning).
pub fn train_rbf(x: &Array2<f64>, y: &Array2<f64>, cfg: &RbfConfig) -> Result<RbfFit> {
    if !(cfg.spread > 0.0) {
        return Err(Error::Validation(format!("spread must be positive, got {}", cfg.spread)));
    }
    if !(cfg.ridge > 0.0) {
        return Err(Error::Validation(format!("ridge must be positive, got {}", cfg.ridge)));
    }
    let n = x.nrows();
    if n == 0 || y.nrows() != n {
        return Err(Error::Shape(format!(
            "RBF training needs matching non-empty inputs {:?} and targets {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let n_out = y.ncols();
    let max_centers = cfg.max_centers.unwrap_or(n).min(n);
    let scale = 1.0 / (2.0 * cfg.spread * cfg.spread);
    let mut lsq = GrowingLsq::new(n, n_out, max_centers + 1, cfg.ridge);
    if !lsq.push(&Array1::ones(n), y) {
        return Err(Error::Numeric("bias column could not be factored".into()));
    }
    let mut resid = y - &lsq.fitted_increment(0);
    let mut used = vec![false; n];
    let mut chosen: Vec<usize> = Vec::new();
    let mut history = vec![(0usize, mse_of(&resid))];
    let mut stop_reason = "center budget exhausted".to_string();
    let x_std = x.as_standard_layout();

    loop {
        let current = history.last().unwrap().1;
        if current <= cfg.mse_goal {
            stop_reason = "mse goal reached".into();
            break;
        }
        if chosen.len() >= max_centers {
            break;
        }
        let pick = (0..n)
            .filter(|&i| !used[i])
            .map(|i| (i, resid.row(i).iter().map(|v| v * v).sum::<f64>()))
            .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
                Some((_, best)) if best >= r => acc,
                _ => Some((i, r)),
            });
        let Some((idx, _)) = pick else { break };
        used[idx] = true;
        let c = x_std.row(idx).to_vec();
        let col = Array1::from_iter(
            x_std
                .rows()
                .into_iter()
                .map(|row| gaussian(row.as_slice().expect("standard layout"), &c, scale)),
        );
        let mut ok = lsq.push(&col, y);
        let mut refactored = false;
        while !ok {
            let bumped = lsq.ridge * 10.0;
            log::warn!(
                "RBF normal equations not positive definite with {} centers; ridge raised to {bumped:e}",
                chosen.len() + 1
            );
            if bumped > 1.0 {
                return Err(Error::Numeric("RBF normal equations remain singular".into()));
            }
            ok = lsq.refactor(bumped);
            refactored = true;
        }
        if refactored {
            resid = y - &lsq.fitted();
        } else {
            resid -= &lsq.fitted_increment(lsq.k - 1);
        }
        chosen.push(idx);
        history.push((chosen.len(), mse_of(&resid)));
    }

    let theta = lsq.coefficients(y);
    let centers = x.select(Axis(0), &chosen);
    let bias = theta.row(0).to_owned();
    let weights = theta.slice(s![1.., ..]).to_owned();
    let model = Rbf::new(centers, cfg.spread, weights, bias)?;
    let pred = model.predict(x)?;
    let train_mse = super::mse(&pred, y);
    if let Some(last) = history.last_mut() {
        last.1 = train_mse;
    }
    if !train_mse.is_finite() {
        return Err(Error::Numeric("non-finite RBF training error".into()));
    }
    Ok(RbfFit {
        model,
        history,
        train_mse,
        ridge: lsq.ridge,
        stop_reason,
    })
}
