//! Surrogate metrics: tolerance accuracy, accuracy-vs-tolerance curves,
//! R², k-fold selection of the L2 strength, and the gated prediction path.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{interpretability_filter, Dataset, FilterCriteria, Split};
use crate::domain::{AngularGrid, MsfConfig, PhysicalParams};
use crate::error::{Error, Result};
use crate::measures::{extract_measures, PatternMeasures};
use crate::neural::{mse, train_scg, Mlp, ModelFile, NeuralModel, TrainConfig};
use crate::rng::SeededRng;

/// Samples whose true beam is this close to the pole have no meaningful
/// azimuth and are left out of the azimuth accuracy.
pub const PHI_EXCLUSION_THETA_DEG: f64 = 2.0;

/// Per-measure tolerance lists (dB for directivity and PSLR, degrees for the
/// beam direction and HPBW), each positive and ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSpec {
    pub directivity_db: Vec<f64>,
    pub pslr_db: Vec<f64>,
    pub angle_deg: Vec<f64>,
    pub hpbw_deg: Vec<f64>,
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        Self {
            directivity_db: vec![0.1, 0.25, 0.5],
            pslr_db: vec![0.1, 0.25, 0.5],
            angle_deg: vec![1.0, 2.0, 5.0],
            hpbw_deg: vec![0.25, 0.5, 1.0],
        }
    }
}

impl ToleranceSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("directivity", &self.directivity_db),
            ("pslr", &self.pslr_db),
            ("angle", &self.angle_deg),
            ("hpbw", &self.hpbw_deg),
        ] {
            if list.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
                return Err(Error::Validation(format!("{name} tolerances must be positive and finite")));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!("{name} tolerances must be strictly ascending")));
            }
        }
        Ok(())
    }
}

/// Absolute prediction errors per measure, after exclusions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasureErrors {
    pub directivity: Vec<f64>,
    pub pslr: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub hpbw: Vec<f64>,
    pub n_samples: usize,
    /// Samples left out of the azimuth accuracy (true elevation below the cut).
    pub phi_excluded: usize,
    /// Samples whose true PSLR is not finite (single-lobe patterns).
    pub pslr_excluded: usize,
}

/// Shortest angular distance between two azimuths, in degrees.
pub fn circular_difference_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Absolute errors of `predictions` against physical-unit `targets`.
pub fn measure_errors(predictions: &[PatternMeasures], targets: &[PatternMeasures]) -> Result<MeasureErrors> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut e = MeasureErrors {
        n_samples: targets.len(),
        ..MeasureErrors::default()
    };
    for (p, t) in predictions.iter().zip(targets) {
        e.directivity.push((p.directivity_db - t.directivity_db).abs());
        if t.pslr_db.is_finite() {
            e.pslr.push((p.pslr_db - t.pslr_db).abs());
        } else {
            e.pslr_excluded += 1;
        }
        e.theta.push((p.theta_max_deg - t.theta_max_deg).abs());
        if t.theta_max_deg < PHI_EXCLUSION_THETA_DEG {
            e.phi_excluded += 1;
        } else {
            e.phi.push(circular_difference_deg(p.phi_max_deg, t.phi_max_deg));
        }
        e.hpbw.push((p.hpbw_deg - t.hpbw_deg).abs());
    }
    Ok(e)
}

/// Fraction of errors within `tol` (closed interval); `NaN` for no samples.
/// A `NaN` error never counts as within tolerance.
pub fn fraction_within(errors: &[f64], tol: f64) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    errors.iter().filter(|&&e| e <= tol).count() as f64 / errors.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKey {
    Directivity,
    Pslr,
    Theta,
    Phi,
    /// Mean of the elevation and azimuth accuracies at the same tolerance.
    Angle,
    Hpbw,
}

impl MeasureKey {
    pub const ALL: [MeasureKey; 6] = [
        MeasureKey::Directivity,
        MeasureKey::Pslr,
        MeasureKey::Theta,
        MeasureKey::Phi,
        MeasureKey::Angle,
        MeasureKey::Hpbw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MeasureKey::Directivity => "directivity",
            MeasureKey::Pslr => "pslr",
            MeasureKey::Theta => "theta",
            MeasureKey::Phi => "phi",
            MeasureKey::Angle => "angle",
            MeasureKey::Hpbw => "hpbw",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            MeasureKey::Directivity | MeasureKey::Pslr => "dB",
            _ => "deg",
        }
    }

    fn tolerances(self, spec: &ToleranceSpec) -> &[f64] {
        match self {
            MeasureKey::Directivity => &spec.directivity_db,
            MeasureKey::Pslr => &spec.pslr_db,
            MeasureKey::Theta | MeasureKey::Phi | MeasureKey::Angle => &spec.angle_deg,
            MeasureKey::Hpbw => &spec.hpbw_deg,
        }
    }
}

impl MeasureErrors {
    pub fn accuracy(&self, key: MeasureKey, tol: f64) -> f64 {
        match key {
            MeasureKey::Directivity => fraction_within(&self.directivity, tol),
            MeasureKey::Pslr => fraction_within(&self.pslr, tol),
            MeasureKey::Theta => fraction_within(&self.theta, tol),
            MeasureKey::Phi => fraction_within(&self.phi, tol),
            MeasureKey::Angle => {
                let t = fraction_within(&self.theta, tol);
                let p = fraction_within(&self.phi, tol);
                if p.is_nan() {
                    t
                } else {
                    0.5 * (t + p)
                }
            }
            MeasureKey::Hpbw => fraction_within(&self.hpbw, tol),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub measure: MeasureKey,
    pub tolerance: f64,
    pub accuracy: f64,
    /// Published reference accuracy for this model family, where one exists.
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub model: String,
    pub n_samples: usize,
    pub phi_excluded: usize,
    pub pslr_excluded: usize,
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyReport {
    pub fn get(&self, measure: MeasureKey, tolerance: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.measure == measure && (r.tolerance - tolerance).abs() < 1e-12)
            .map(|r| r.accuracy)
    }
}

/// Published accuracies of the two surrogate families at the default
/// tolerances: `(measure, tolerance, mlp, cnn)`.
pub const REFERENCE_ACCURACY: [(MeasureKey, f64, f64, f64); 12] = [
    (MeasureKey::Directivity, 0.5, 0.999, 0.998),
    (MeasureKey::Directivity, 0.25, 0.950, 0.906),
    (MeasureKey::Directivity, 0.1, 0.563, 0.488),
    (MeasureKey::Pslr, 0.5, 0.999, 0.994),
    (MeasureKey::Pslr, 0.25, 0.983, 0.943),
    (MeasureKey::Pslr, 0.1, 0.861, 0.801),
    (MeasureKey::Angle, 5.0, 0.998, 0.989),
    (MeasureKey::Angle, 2.0, 0.727, 0.607),
    (MeasureKey::Angle, 1.0, 0.406, 0.319),
    (MeasureKey::Hpbw, 1.0, 0.995, 0.988),
    (MeasureKey::Hpbw, 0.5, 0.973, 0.926),
    (MeasureKey::Hpbw, 0.25, 0.792, 0.618),
];

pub fn reference_accuracy(model_kind: &str, measure: MeasureKey, tolerance: f64) -> Option<f64> {
    REFERENCE_ACCURACY
        .iter()
        .find(|(m, t, _, _)| *m == measure && (t - tolerance).abs() < 1e-12)
        .and_then(|&(_, _, mlp, cnn)| match model_kind {
            "mlp" => Some(mlp),
            "cnn" => Some(cnn),
            _ => None,
        })
}

/// Tolerance accuracy of every measure at every tolerance of `spec`.
pub fn tolerance_accuracy(
    predictions: &[PatternMeasures],
    targets: &[PatternMeasures],
    spec: &ToleranceSpec,
    model_kind: &str,
) -> Result<AccuracyReport> {
    spec.validate()?;
    let errors = measure_errors(predictions, targets)?;
    Ok(report_from_errors(&errors, spec, model_kind))
}

pub fn report_from_errors(errors: &MeasureErrors, spec: &ToleranceSpec, model_kind: &str) -> AccuracyReport {
    let mut rows = Vec::new();
    for key in MeasureKey::ALL {
        for &tol in key.tolerances(spec) {
            rows.push(AccuracyRow {
                measure: key,
                tolerance: tol,
                accuracy: errors.accuracy(key, tol),
                reference: reference_accuracy(model_kind, key, tol),
            });
        }
    }
    AccuracyReport {
        model: model_kind.to_string(),
        n_samples: errors.n_samples,
        phi_excluded: errors.phi_excluded,
        pslr_excluded: errors.pslr_excluded,
        rows,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.3}"),
        _ => "-".into(),
    }
}

/// Side-by-side text table of one or more reports.
pub fn format_reports(reports: &[AccuracyReport]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<12} {:>9} {:<4}", "measure", "tolerance", "unit");
    for r in reports {
        let _ = write!(s, " {:>10} {:>10}", r.model, format!("{}(ref)", r.model));
    }
    s.push('\n');
    if let Some(first) = reports.first() {
        for (k, row) in first.rows.iter().enumerate() {
            let _ = write!(
                s,
                "{:<12} {:>9} {:<4}",
                row.measure.name(),
                row.tolerance,
                row.measure.unit()
            );
            for r in reports {
                let other = r.rows.get(k);
                let _ = write!(
                    s,
                    " {:>10} {:>10}",
                    fmt_opt(other.map(|o| o.accuracy)),
                    fmt_opt(other.and_then(|o| o.reference))
                );
            }
            s.push('\n');
        }
    }
    for r in reports {
        let _ = writeln!(
            s,
            "{}: {} samples, {} excluded from phi (theta < {PHI_EXCLUSION_THETA_DEG} deg), {} excluded from pslr (single lobe)",
            r.model, r.n_samples, r.phi_excluded, r.pslr_excluded
        );
    }
    s
}

/// One point of an accuracy-vs-tolerance curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub measure: MeasureKey,
    pub model: String,
    pub tolerance: f64,
    pub accuracy: f64,
}

/// Fine tolerance sweep: 0.01..=1.0 dB and 0.1..=10 degrees, 100 points each.
pub fn accuracy_curves(errors: &MeasureErrors, model: &str) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    for key in MeasureKey::ALL {
        let step = if key.unit() == "dB" { 0.01 } else { 0.1 };
        for k in 1..=100 {
            let tol = k as f64 * step;
            out.push(CurvePoint {
                measure: key,
                model: model.to_string(),
                tolerance: tol,
                accuracy: errors.accuracy(key, tol),
            });
        }
    }
    out
}

/// Writes curves as CSV `measure,model,tolerance,accuracy`.
pub fn emit_curves<W: Write>(points: &[CurvePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "measure,model,tolerance,accuracy")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{}",
            p.measure.name(),
            p.model,
            crate::farfield::fmt_sig9(p.tolerance),
            crate::farfield::fmt_sig9(p.accuracy)
        )?;
    }
    Ok(())
}

/// Coefficient of determination over all entries.
pub fn r_squared(predictions: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if predictions.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs targets {:?}",
            predictions.dim(),
            targets.dim()
        )));
    }
    let n = targets.len();
    if n == 0 {
        return Err(Error::Validation("R² of an empty set".into()));
    }
    let mean = targets.sum() / n as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::Validation("R² is undefined for constant targets".into()));
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Fold index of each of `n` samples: a seeded shuffle dealt round-robin
/// into `k` folds.
pub fn kfold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::child(seed, 0xcf).shuffle(&mut order);
    let mut fold = vec![0; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold[idx] = pos % k;
    }
    fold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub lambdas: Vec<f64>,
    /// `fold_mse[l][f]`: validation MSE of candidate `l` on fold `f`.
    pub fold_mse: Vec<Vec<f64>>,
    pub mean_mse: Vec<f64>,
    pub best_lambda: f64,
    pub n_samples: usize,
    pub folds: Vec<usize>,
}

impl CvReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:>10} {:>14}\n", "lambda", "cv_mse");
        for (l, m) in self.lambdas.iter().zip(&self.mean_mse) {
            let mark = if *l == self.best_lambda { " *" } else { "" };
            let _ = writeln!(s, "{l:>10} {m:>14.6e}{mark}");
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "lambda,cv_mse,{}", (0..self.fold_mse.first().map_or(0, Vec::len))
            .map(|f| format!("fold{f}"))
            .collect::<Vec<_>>()
            .join(","))?;
        for ((l, m), folds) in self.lambdas.iter().zip(&self.mean_mse).zip(&self.fold_mse) {
            let cols: Vec<String> = folds.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{l},{m},{}", cols.join(","))?;
        }
        Ok(())
    }
}

/// k-fold selection of the L2 strength.
///
/// For every candidate, a fresh model from `make_model` is trained by SCG on
/// k-1 folds (no early stopping: the held-out fold is only scored) and its
/// MSE on the held-out fold recorded; the candidate with the lowest mean
/// wins, ties going to the earlier candidate. Folds train in parallel.
pub fn cross_validate_lambda<M, F>(
    x: &Array2<f64>,
    y: &Array2<f64>,
    candidates: &[f64],
    k: usize,
    cfg: &TrainConfig,
    make_model: F,
) -> Result<CvReport>
where
    M: NeuralModel + Send,
    F: Fn() -> Result<M> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::Validation("no lambda candidates given".into()));
    }
    if k < 2 {
        return Err(Error::Validation(format!("need at least 2 folds, got {k}")));
    }
    let n = x.nrows();
    if n < k {
        return Err(Error::Validation(format!("{n} samples cannot fill {k} folds")));
    }
    let folds = kfold_assignment(n, k, cfg.seed);
    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|l| (0..k).map(move |f| (l, f)))
        .collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(l, f)| -> Result<f64> {
            let train_idx: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let val_idx: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let (xt, yt) = (x.select(Axis(0), &train_idx), y.select(Axis(0), &train_idx));
            let (xv, yv) = (x.select(Axis(0), &val_idx), y.select(Axis(0), &val_idx));
            let empty_x = Array2::zeros((0, x.ncols()));
            let empty_y = Array2::zeros((0, y.ncols()));
            let mut model = make_model()?;
            let fold_cfg = TrainConfig {
                l2_lambda: candidates[l],
                patience: usize::MAX,
                ..cfg.clone()
            };
            train_scg(&mut model, (&xt, &yt), (&empty_x, &empty_y), &fold_cfg)?;
            Ok(mse(&model.predict(&xv)?, &yv))
        })
        .collect::<Result<_>>()?;
    let fold_mse: Vec<Vec<f64>> = scores.chunks(k).map(<[f64]>::to_vec).collect();
    let mean_mse: Vec<f64> = fold_mse.iter().map(|f| f.iter().sum::<f64>() / k as f64).collect();
    let best = mean_mse
        .iter()
        .enumerate()
        .fold(0, |b, (i, m)| if *m < mean_mse[b] { i } else { b });
    Ok(CvReport {
        lambdas: candidates.to_vec(),
        fold_mse,
        mean_mse,
        best_lambda: candidates[best],
        n_samples: n,
        folds,
    })
}

/// Convenience wrapper: CV of the default MLP surrogate on up to
/// `subsample` training records of a dataset.
pub fn cross_validate_mlp_lambda(
    dataset: &Dataset,
    candidates: &[f64],
    subsample: usize,
    cfg: &TrainConfig,
) -> Result<CvReport> {
    let (x, y) = dataset.design_matrices(Split::Train)?;
    let n = x.nrows();
    let (x, y) = if subsample < n {
        let mut idx = SeededRng::child(cfg.seed, 0x5b).sample_indices(n, subsample);
        idx.sort_unstable();
        (x.select(Axis(0), &idx), y.select(Axis(0), &idx))
    } else {
        (x, y)
    };
    let n_in = x.ncols();
    cross_validate_lambda(&x, &y, candidates, 10, cfg, || Mlp::default_surrogate(n_in, cfg.seed))
}

/// Physical-unit predictions of a 5-output surrogate for `configs`.
pub fn predict_measures(file: &ModelFile, configs: &[&MsfConfig]) -> Result<Vec<PatternMeasures>> {
    let norm = file
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Validation("model carries no normalization statistics".into()))?;
    if file.model.n_outputs() != 5 {
        return Err(Error::Shape(format!(
            "measure surrogate must have 5 outputs, model has {}",
            file.model.n_outputs()
        )));
    }
    let n_in = file.model.n_inputs();
    let mut x = Array2::zeros((configs.len(), n_in));
    for (k, c) in configs.iter().enumerate() {
        if c.n_cells() != n_in {
            return Err(Error::Shape(format!(
                "configuration has {} cells, model expects {n_in}",
                c.n_cells()
            )));
        }
        for (j, v) in norm.normalize_inputs(c).into_iter().enumerate() {
            x[[k, j]] = v;
        }
    }
    let z = file.model.predict(&x)?;
    Ok(z.rows()
        .into_iter()
        .map(|r| PatternMeasures::from_slice(&norm.destandardize(&r.to_vec())))
        .collect())
}

/// Predictions and ground truth for every record of `split`.
pub fn predictions_for_split(
    file: &ModelFile,
    dataset: &Dataset,
    split: Split,
) -> Result<(Vec<PatternMeasures>, Vec<PatternMeasures>)> {
    let recs: Vec<_> = dataset.split(split).collect();
    let configs: Vec<&MsfConfig> = recs.iter().map(|r| &r.config).collect();
    let preds = predict_measures(file, &configs)?;
    let targets = recs.iter().map(|r| r.measures).collect();
    Ok((preds, targets))
}

/// Outcome of a gated prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GatedPrediction {
    Predicted {
        prediction: PatternMeasures,
        /// Analytical measures when the gate ran.
        analytical: Option<PatternMeasures>,
    },
    Rejected {
        analytical: PatternMeasures,
        reason: String,
    },
}

/// Runtime path: analytically check that the configuration is interpretable
/// and only then query the surrogate. `criteria = None` skips the gate.
pub fn predict_gated(
    config: &MsfConfig,
    file: &ModelFile,
    criteria: Option<&FilterCriteria>,
) -> Result<GatedPrediction> {
    if config.n_cells() != file.model.n_inputs() {
        return Err(Error::Shape(format!(
            "configuration has {} cells, model expects {}",
            config.n_cells(),
            file.model.n_inputs()
        )));
    }
    let analytical = match criteria {
        None => None,
        Some(c) => {
            let (params, grid) = match &file.train_meta.context {
                Some(ctx) => (ctx.params, ctx.grid.clone()),
                None => (PhysicalParams::default(), AngularGrid::default()),
            };
            let m = extract_measures(config, &params, &grid)?;
            if !interpretability_filter(&m, c) {
                return Ok(GatedPrediction::Rejected {
                    analytical: m,
                    reason: format!(
                        "directivity {:.3} dB / PSLR {:.3} dB below criteria {} / {} dB",
                        m.directivity_db, m.pslr_db, c.min_directivity_db, c.min_pslr_db
                    ),
                });
            }
            Some(m)
        }
    };
    let prediction = predict_measures(file, &[config])?[0];
    Ok(GatedPrediction::Predicted { prediction, analytical })
}
