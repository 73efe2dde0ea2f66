//! Scaled conjugate gradient (Moller, 1993).
//!
//! Full-batch optimizer with conjugate search directions, a second-order step
//! length from a finite-difference Hessian-vector product, and a
//! Levenberg-Marquardt style scalar that keeps the local quadratic model
//! positive definite. No line search and no learning rate.

/// Differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value_grad(&mut self, w: &[f64]) -> (f64, Vec<f64>);
    fn value(&mut self, w: &[f64]) -> f64 {
        self.value_grad(w).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScgOptions {
    pub max_iterations: usize,
    /// Stop once the gradient norm falls below this value.
    pub grad_tol: f64,
    /// Base finite-difference step for the Hessian-vector product.
    pub sigma: f64,
    /// Initial scaling parameter.
    pub lambda_init: f64,
}

impl Default for ScgOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            grad_tol: 1e-8,
            sigma: 5e-5,
            lambda_init: 5e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScgStop {
    GradientTolerance,
    MaxIterations,
    Monitor,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScgResult {
    pub params: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    /// Iterations performed (successful and unsuccessful).
    pub iterations: usize,
    pub stop: ScgStop,
}

/// Monitor verdict after an accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| yi + alpha * xi).collect()
}

/// Minimizes `obj` from `w0`. `monitor(k, w, f)` runs after every accepted
/// step `k` (1-based) and may stop the run.
pub fn scg_minimize<O: Objective + ?Sized>(
    obj: &mut O,
    w0: &[f64],
    opts: &ScgOptions,
    monitor: &mut dyn FnMut(usize, &[f64], f64) -> Control,
) -> ScgResult {
    let n = w0.len();
    let mut w = w0.to_vec();
    let (mut f, g) = obj.value_grad(&w);
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut p = r.clone();
    let mut lambda = opts.lambda_init;
    let mut lambda_bar = 0.0;
    let mut success = true;
    let mut accepted = 0usize;
    let mut delta = 0.0;

    let finish = |w: Vec<f64>, f: f64, r: &[f64], it: usize, stop: ScgStop| ScgResult {
        params: w,
        value: f,
        grad_norm: dot(r, r).sqrt(),
        iterations: it,
        stop,
    };

    if !f.is_finite() {
        return finish(w, f, &r, 0, ScgStop::NonFinite);
    }
    if dot(&r, &r).sqrt() < opts.grad_tol {
        return finish(w, f, &r, 0, ScgStop::GradientTolerance);
    }

    for it in 1..=opts.max_iterations {
        let p_sq = dot(&p, &p);
        if success {
            // Second-order information from a gradient difference.
            let sigma_k = opts.sigma / p_sq.sqrt();
            let w_probe = axpy(sigma_k, &p, &w);
            let (_, g_probe) = obj.value_grad(&w_probe);
            // s = (g(w + sigma p) - g(w)) / sigma, with g(w) = -r.
            delta = g_probe
                .iter()
                .zip(&r)
                .zip(&p)
                .map(|((gp, rk), pk)| pk * (gp + rk) / sigma_k)
                .sum();
        }
        // Curvature along p of the scaled model (H + lambda I).
        let mut delta_k = delta + (lambda - lambda_bar) * p_sq;
        if delta_k <= 0.0 {
            // Raise lambda until the model is positive definite along p.
            lambda_bar = 2.0 * (lambda - delta_k / p_sq);
            delta_k = -delta_k + lambda * p_sq;
            lambda = lambda_bar;
        }
        let mu = dot(&p, &r);
        let alpha = mu / delta_k;
        let w_new = axpy(alpha, &p, &w);
        let (f_new, g_new) = obj.value_grad(&w_new);
        let comparison = if f_new.is_finite() {
            2.0 * delta_k * (f - f_new) / (mu * mu)
        } else {
            f64::NEG_INFINITY
        };

        if comparison >= 0.0 {
            let r_new: Vec<f64> = g_new.iter().map(|v| -v).collect();
            w = w_new;
            f = f_new;
            lambda_bar = 0.0;
            success = true;
            accepted += 1;
            let r_new_sq = dot(&r_new, &r_new);
            if accepted.is_multiple_of(n) {
                p = r_new.clone();
            } else {
                let beta = (r_new_sq - dot(&r_new, &r)) / mu;
                p = r_new.iter().zip(&p).map(|(ri, pi)| ri + beta * pi).collect();
            }
            r = r_new;
            if comparison >= 0.75 {
                lambda *= 0.25;
            }
            if !f.is_finite() {
                return finish(w, f, &r, it, ScgStop::NonFinite);
            }
            if monitor(accepted, &w, f) == Control::Stop {
                return finish(w, f, &r, it, ScgStop::Monitor);
            }
            if r_new_sq.sqrt() < opts.grad_tol {
                return finish(w, f, &r, it, ScgStop::GradientTolerance);
            }
        } else {
            lambda_bar = lambda;
            success = false;
        }
        if comparison < 0.25 {
            let inc = if comparison.is_finite() {
                delta_k * (1.0 - comparison) / p_sq
            } else {
                4.0 * lambda.max(1e-12)
            };
            lambda += inc;
        }
        if !lambda.is_finite() || lambda > 1e100 {
            return finish(w, f, &r, it, ScgStop::NonFinite);
        }
    }
    finish(w, f, &r, opts.max_iterations, ScgStop::MaxIterations)
}
