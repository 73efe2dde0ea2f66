/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_probed: usize,
    pub max_rel_error: f64,
    /// Parameter index with the largest relative error.
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Central-difference check of `grad` at the given probe indices.
///
/// The relative error is `|a - n| / max(|a|, |n|, 1e-8)`; the floor keeps
/// vanishing gradient entries from dividing by round-off.
pub fn finite_difference_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    params: &[f64],
    grad: &[f64],
    probes: &[usize],
    h: f64,
) -> GradCheckReport {
    let mut w = params.to_vec();
    let mut report = GradCheckReport {
        n_probed: probes.len(),
        max_rel_error: 0.0,
        worst_index: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &i in probes {
        let orig = w[i];
        w[i] = orig + h;
        let fp = f(&w);
        w[i] = orig - h;
        let fm = f(&w);
        w[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    report
}
