//! Optimizers and networks on problems with known answers: a convex
//! quadratic, a smooth 1-D regression, interpolation limits, shrinkage under
//! noise features and seeded determinism of whole training runs.

use msfnet::datagen::{generate_dataset, generate_steering_config, incidence_pattern_table, inject_entropy, GenerateOptions, Split};
use msfnet::evaluate::{cross_validate_lambda, kfold_assignment, predict_gated, r_squared, GatedPrediction};
use msfnet::neural::{
    save_model, scg_minimize, train_rbf, train_scg, train_sgd, Activation, Cnn, CnnArch, Control, Mlp, ModelContext,
    ModelFile, NeuralModel, Objective, Optimizer, RbfConfig, ScgOptions, SurrogateModel, TrainConfig, TrainMeta,
};
use msfnet::datagen::FilterCriteria;
use msfnet::{AngularGrid, MsfConfig, PhysicalParams, SeededRng};
use ndarray::{Array1, Array2, Axis};
use sha2::{Digest, Sha256};

/// f(w) = |A w - b|^2.
struct LeastSquares {
    a: Array2<f64>,
    b: Array1<f64>,
}

impl Objective for LeastSquares {
    fn dim(&self) -> usize {
        self.a.ncols()
    }
    fn value_grad(&mut self, w: &[f64]) -> (f64, Vec<f64>) {
        let r = self.a.dot(&Array1::from(w.to_vec())) - &self.b;
        let g = self.a.t().dot(&r) * 2.0;
        (r.dot(&r), g.to_vec())
    }
}

/// Solves the small dense system `m x = v` by Gaussian elimination.
fn solve(mut m: Array2<f64>, mut v: Array1<f64>) -> Array1<f64> {
    let n = v.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs())).unwrap();
        for k in 0..n {
            m.swap([c, k], [p, k]);
        }
        v.swap(c, p);
        for r in c + 1..n {
            let f = m[[r, c]] / m[[c, c]];
            for k in c..n {
                m[[r, k]] -= f * m[[c, k]];
            }
            v[r] -= f * v[c];
        }
    }
    let mut x = Array1::zeros(n);
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[[r, k]] * x[k]).sum();
        x[r] = (v[r] - s) / m[[r, r]];
    }
    x
}

#[test]
fn scg_solves_a_convex_quadratic() {
    let mut rng = SeededRng::new(10);
    // Well conditioned: identity plus a small random perturbation.
    let a = Array2::from_shape_fn((10, 10), |(i, j)| f64::from(u8::from(i == j)) * 2.0 + 0.2 * rng.normal());
    let b = Array1::from_shape_fn(10, |_| rng.normal());
    let exact = solve(a.t().dot(&a), a.t().dot(&b));
    let mut obj = LeastSquares { a, b };
    let opts = ScgOptions {
        max_iterations: 200,
        grad_tol: 1e-8,
        ..ScgOptions::default()
    };
    let res = scg_minimize(&mut obj, &[0.0; 10], &opts, &mut |_, _, _| Control::Continue);
    assert!(res.grad_norm < 1e-8, "{res:?}");
    assert!(res.iterations <= 200);
    for (w, e) in res.params.iter().zip(&exact) {
        assert!((w - e).abs() < 1e-6, "{w} vs {e}");
    }
}

fn sine_data(n: usize) -> (Array2<f64>, Array2<f64>) {
    let x = Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
    let y = x.mapv(|v| (3.0 * v).sin());
    (x, y)
}

fn empty(cols_in: usize, cols_out: usize) -> (Array2<f64>, Array2<f64>) {
    (Array2::zeros((0, cols_in)), Array2::zeros((0, cols_out)))
}

#[test]
fn scg_fits_a_smooth_curve() {
    let (x, y) = sine_data(500);
    let (xv, yv) = empty(1, 1);
    let mut mlp = Mlp::new(&[1, 20, 1], Activation::Tanh, 3).unwrap();
    let cfg = TrainConfig {
        l2_lambda: 0.0,
        max_iterations: 1000,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train_scg(&mut mlp, (&x, &y), (&xv, &yv), &cfg).unwrap();
    let mse = msfnet::neural::mse(&mlp.predict(&x).unwrap(), &y);
    assert!(mse < 1e-3, "mse {mse} after {} steps ({})", out.history.len(), out.stop_reason);
}

#[test]
fn zero_patience_stops_at_first_setback() {
    let (x, y) = sine_data(200);
    // Validation targets from a different function, so validation error
    // eventually rises while training error keeps falling.
    let xv = x.clone();
    let yv = x.mapv(|v| (3.0 * v).sin() + 0.5 * v * v);
    let mut mlp = Mlp::new(&[1, 10, 1], Activation::Tanh, 1).unwrap();
    let cfg = TrainConfig {
        l2_lambda: 0.0,
        patience: 0,
        max_iterations: 2000,
        ..TrainConfig::default()
    };
    let out = train_scg(&mut mlp, (&x, &y), (&xv, &yv), &cfg).unwrap();
    assert_eq!(out.stop_reason, "validation patience exhausted");
    let h = &out.history;
    let last = h.len() - 1;
    for k in 1..last {
        assert!(h[k].val_mse < h[k - 1].val_mse, "setback at {k} before the end");
    }
    assert!(h[last].val_mse >= h[last - 1].val_mse);
    assert_eq!(out.best_step, h[last - 1].step);
}

fn weight_norm(m: &Mlp) -> f64 {
    m.params().iter().zip(m.weight_mask()).filter(|(_, w)| *w).map(|(p, _)| p * p).sum()
}

#[test]
fn stronger_l2_gives_smaller_weights() {
    let (x, y) = sine_data(100);
    let (xv, yv) = empty(1, 1);
    let mut last = f64::INFINITY;
    for lambda in [0.0, 0.01, 0.1, 1.0, 10.0] {
        let mut mlp = Mlp::new(&[1, 10, 1], Activation::Tanh, 5).unwrap();
        let cfg = TrainConfig {
            l2_lambda: lambda,
            max_iterations: 500,
            ..TrainConfig::default()
        };
        train_scg(&mut mlp, (&x, &y), (&xv, &yv), &cfg).unwrap();
        let norm = weight_norm(&mlp);
        assert!(norm <= last + 1e-9, "lambda {lambda}: {norm} > {last}");
        last = norm;
    }
}

#[test]
fn cross_validation_prefers_shrinkage_with_noise_features() {
    let mut rng = SeededRng::new(21);
    let (n, d) = (40, 30);
    let x = Array2::from_shape_fn((n, d), |_| rng.normal());
    let y = Array2::from_shape_fn((n, 1), |(i, _)| (0..5).map(|k| x[[i, k]]).sum::<f64>() + rng.normal());
    let cfg = TrainConfig {
        max_iterations: 300,
        seed: 4,
        ..TrainConfig::default()
    };
    let make = || Mlp::new(&[d, 1], Activation::Linear, 4);
    let report = cross_validate_lambda(&x, &y, &[0.0, 0.3, 3.0, 30.0], 10, &cfg, make).unwrap();
    println!("{}", report.table());
    assert!(report.best_lambda > 0.0);

    let again = cross_validate_lambda(&x, &y, &[0.0, 0.3, 3.0, 30.0], 10, &cfg, make).unwrap();
    assert_eq!(report, again);

    let single = cross_validate_lambda(&x, &y, &[0.8], 10, &cfg, make).unwrap();
    assert_eq!(single.best_lambda, 0.8);
    assert_eq!(single.mean_mse.len(), 1);
    assert!(single.mean_mse[0].is_finite());
}

#[test]
fn every_index_is_validated_exactly_once() {
    let folds = kfold_assignment(10_000, 10, 42);
    let mut sizes = [0usize; 10];
    for &f in &folds {
        sizes[f] += 1;
    }
    assert_eq!(sizes, [1000; 10]);
    assert_eq!(folds, kfold_assignment(10_000, 10, 42));
}

#[test]
fn rbf_learns_the_synthetic_incidence_table() {
    // A small 4x4 patch plays the role of the solver-tabulated cell.
    let config = generate_steering_config(20.0, 30.0, 4, 4, 8, &PhysicalParams::default()).unwrap();
    let (f, t) = incidence_pattern_table(&config, &PhysicalParams::default(), 90, 90, 90);
    let mut buf = Vec::new();
    msfnet::datagen::write_tabulated_patterns(&mut buf, &f, &t).unwrap();
    let data = msfnet::datagen::read_tabulated_patterns(buf.as_slice(), 0).unwrap();
    let (x, y) = data.rows(&data.train);
    let (xt, yt) = data.rows(&data.test);
    let fit = train_rbf(
        &x,
        &y,
        &RbfConfig {
            spread: 0.3,
            mse_goal: 1e-6,
            max_centers: Some(400),
            ..RbfConfig::default()
        },
    )
    .unwrap();
    let r2 = r_squared(&fit.model.predict(&xt).unwrap(), &yt).unwrap();
    println!("held-out R^2 {r2:.5} with {} centers", fit.model.n_centers());
    assert!(r2 >= 0.99, "{r2}");
}

fn small_cnn_corpus() -> msfnet::Dataset {
    generate_dataset(5000, 42, &GenerateOptions::default()).unwrap()
}

#[test]
fn cnn_training_error_falls_over_the_first_epochs() {
    let ds = small_cnn_corpus();
    let (x, y) = ds.design_matrices(Split::Train).unwrap();
    let (xv, yv) = ds.design_matrices(Split::Validation).unwrap();
    let mut cnn = Cnn::new(CnnArch::surrogate(12, 12), 42).unwrap();
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        max_epochs: 5,
        seed: 42,
        ..TrainConfig::default()
    };
    let out = train_sgd(&mut cnn, (&x, &y), (&xv, &yv), &cfg).unwrap();
    let mses: Vec<f64> = out.history.iter().map(|h| h.train_mse).collect();
    println!("cnn train mse by epoch: {mses:?}");
    assert_eq!(mses.len(), 5);
    assert!(mses.windows(2).all(|w| w[1] < w[0]), "{mses:?}");
}

fn train_small_mlp(seed: u64) -> Vec<u8> {
    let ds = generate_dataset(300, seed, &GenerateOptions::default()).unwrap();
    let (x, y) = ds.design_matrices(Split::Train).unwrap();
    let (xv, yv) = ds.design_matrices(Split::Validation).unwrap();
    let mut mlp = Mlp::default_surrogate(144, seed).unwrap();
    let cfg = TrainConfig {
        max_iterations: 20,
        seed,
        ..TrainConfig::default()
    };
    let out = train_scg(&mut mlp, (&x, &y), (&xv, &yv), &cfg).unwrap();
    let file = ModelFile {
        model: SurrogateModel::Mlp(mlp),
        normalization: Some(ds.normalization.clone()),
        train_meta: TrainMeta {
            seed,
            optimizer: "scg".into(),
            final_train_mse: out.history.last().map(|h| h.train_mse),
            final_val_mse: Some(out.best_val_mse),
            l2_lambda: cfg.l2_lambda,
            l2_mode: cfg.l2_mode,
            stop_reason: out.stop_reason,
            context: Some(ModelContext {
                n_rows: 12,
                n_cols: 12,
                n_states: 8,
                params: ds.params,
                grid: ds.grid.clone(),
                criteria: FilterCriteria::default(),
            }),
        },
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_model(&path, &file).unwrap();
    std::fs::read(&path).unwrap()
}

#[test]
fn seeded_training_gives_byte_identical_model_files() {
    let a = train_small_mlp(8);
    let b = train_small_mlp(8);
    assert_eq!(Sha256::digest(&a), Sha256::digest(&b));
}

fn untrained_file() -> ModelFile {
    ModelFile {
        model: SurrogateModel::Mlp(Mlp::default_surrogate(144, 0).unwrap()),
        normalization: Some(msfnet::Normalization {
            target_mean: [20.0, 10.0, 30.0, 180.0, 10.0],
            target_scale: [1.0; 5],
            input_scale: 1.0 / 7.0,
        }),
        train_meta: TrainMeta {
            seed: 0,
            optimizer: "scg".into(),
            final_train_mse: None,
            final_val_mse: None,
            l2_lambda: 0.8,
            l2_mode: msfnet::neural::L2Mode::Mean,
            stop_reason: String::new(),
            context: None,
        },
    }
}

#[test]
fn gate_passes_steering_and_rejects_noise() {
    let file = untrained_file();
    let steering = generate_steering_config(25.0, 40.0, 12, 12, 8, &PhysicalParams::default()).unwrap();
    let gate = FilterCriteria::default();
    assert!(matches!(
        predict_gated(&steering, &file, Some(&gate)).unwrap(),
        GatedPrediction::Predicted { analytical: Some(_), .. }
    ));

    // First fully random surface that fails the default criteria.
    let mut rng = SeededRng::new(17);
    let base = MsfConfig::uniform(12, 12, 8, 0).unwrap();
    let noisy = (0..100)
        .map(|_| inject_entropy(&base, 1.0, &mut rng).unwrap())
        .find(|c| {
            let m = msfnet::measures::extract_measures(c, &PhysicalParams::default(), &AngularGrid::default()).unwrap();
            !msfnet::datagen::interpretability_filter(&m, &gate)
        })
        .expect("a failing random surface");
    match predict_gated(&noisy, &file, Some(&gate)).unwrap() {
        GatedPrediction::Rejected { analytical, reason } => {
            assert!(analytical.directivity_db.is_finite());
            assert!(!reason.is_empty());
        }
        other => panic!("expected rejection, got {other:?}"),
    }
    assert!(matches!(
        predict_gated(&noisy, &file, Some(&FilterCriteria::vacuous())).unwrap(),
        GatedPrediction::Predicted { .. }
    ));
    assert!(matches!(
        predict_gated(&noisy, &file, None).unwrap(),
        GatedPrediction::Predicted { analytical: None, .. }
    ));
}

#[test]
fn cnn_and_mlp_agree_on_input_layout() {
    // Both surrogates consume the same row-major normalized state vector.
    let ds = generate_dataset(20, 1, &GenerateOptions::default()).unwrap();
    let (x, _) = ds.design_matrices(Split::Train).unwrap();
    let cnn = Cnn::new(CnnArch::surrogate(12, 12), 0).unwrap();
    let mlp = Mlp::default_surrogate(144, 0).unwrap();
    assert_eq!(cnn.predict(&x).unwrap().len_of(Axis(0)), x.nrows());
    assert_eq!(mlp.predict(&x).unwrap().len_of(Axis(0)), x.nrows());
}
