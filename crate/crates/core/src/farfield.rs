//! Analytical far-field engine.
//!
//! The scattered field of an `N x M` coding surface under uniform normal
//! illumination is the coherent sum of one unit phasor per cell:
//!
//! ```text
//! E(theta, phi) = K * sum_{i=1..M} sum_{j=1..N} exp(1j * (Phi_ij + k0 * zeta_ij(theta, phi)))
//! zeta_ij(theta, phi) = D_u * sin(theta) * ((i - 1/2) cos(phi) + (j - 1/2) sin(phi))
//! ```
//!
//! `Phi_ij` is the reflection phase of the cell's state (uniform `2 pi / Q`
//! spacing), `i` runs over columns and `j` over rows. Cells are isotropic
//! radiators: no element factor and no mutual coupling. Only the upper
//! hemisphere is sampled.
//!
//! [`compute_pattern`] is the direct double sum and serves as the reference.
//! [`FarFieldPlan`] precomputes the per-column and per-row phasor tables of a
//! grid once and evaluates the inner column sums for all grid points with a
//! single real matrix product, which is what dataset generation uses.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::domain::{AngularGrid, MsfConfig, PhysicalParams, UnitCellState};
use crate::error::{Error, Result};

/// Lower clamp for `power_db`, keeps exact nulls finite.
pub const POWER_DB_FLOOR: f64 = -300.0;

/// Reflection phase of a state under uniform Q-level coding.
pub fn phase_of_state(state: UnitCellState, n_states: u16) -> f64 {
    f64::from(state.get()) * 2.0 * PI / f64::from(n_states)
}

/// Geometric path difference of cell `(i, j)` (1-based column, row) towards
/// `(theta, phi)` in radians. Returned in length units; `k0` is applied by
/// the caller.
pub fn relative_phase_shift(
    i: usize,
    j: usize,
    theta_rad: f64,
    phi_rad: f64,
    params: &PhysicalParams,
) -> f64 {
    let (sp, cp) = phi_rad.sin_cos();
    let st = theta_rad.sin();
    path_difference(i, j, st * cp, st * sp, params.cell_pitch())
}

/// [`relative_phase_shift`] from precomputed direction cosines
/// `u = sin(theta) cos(phi)`, `v = sin(theta) sin(phi)`.
fn path_difference(i: usize, j: usize, u: f64, v: f64, cell_pitch: f64) -> f64 {
    let x = i as f64 - 0.5;
    let y = j as f64 - 0.5;
    cell_pitch * (x * u + y * v)
}

/// Complex field and power sampled on an [`AngularGrid`].
///
/// Matrices are stored row-major with theta as the outer index.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiationPattern {
    grid: AngularGrid,
    field: Vec<Complex64>,
    power: Vec<f64>,
    power_db: Vec<f64>,
    peak_power: f64,
}

impl RadiationPattern {
    pub fn from_field(grid: AngularGrid, field: Vec<Complex64>) -> Result<Self> {
        if field.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} samples, grid has {}",
                field.len(),
                grid.len()
            )));
        }
        let n_phi = grid.n_phi();
        let pole = field[0];
        if field[..n_phi].iter().any(|&e| e != pole) {
            return Err(Error::Validation(
                "field must be identical across phi at theta = 0".into(),
            ));
        }
        let power: Vec<f64> = field.iter().map(|e| e.norm_sqr()).collect();
        let peak_power = power.iter().copied().fold(0.0_f64, f64::max);
        if !(peak_power > 0.0 && peak_power.is_finite()) {
            return Err(Error::Validation(format!(
                "pattern peak power must be positive and finite, got {peak_power}"
            )));
        }
        let power_db = power
            .iter()
            .map(|&p| (10.0 * (p / peak_power).log10()).max(POWER_DB_FLOOR))
            .collect();
        Ok(Self {
            grid,
            field,
            power,
            power_db,
            peak_power,
        })
    }

    /// Builds a pattern from a non-negative power matrix (field = sqrt(P)).
    /// Used for injecting synthetic patterns.
    pub fn from_power(grid: AngularGrid, power: &[f64]) -> Result<Self> {
        if let Some(p) = power.iter().find(|p| !(**p >= 0.0)) {
            return Err(Error::Validation(format!("negative or NaN power {p}")));
        }
        let field = power.iter().map(|&p| Complex64::new(p.sqrt(), 0.0)).collect();
        Self::from_field(grid, field)
    }

    pub fn grid(&self) -> &AngularGrid {
        &self.grid
    }

    pub fn n_theta(&self) -> usize {
        self.grid.n_theta()
    }

    pub fn n_phi(&self) -> usize {
        self.grid.n_phi()
    }

    pub fn field(&self) -> &[Complex64] {
        &self.field
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn power_db(&self) -> &[f64] {
        &self.power_db
    }

    pub fn peak_power(&self) -> f64 {
        self.peak_power
    }

    #[inline]
    pub fn index(&self, t: usize, p: usize) -> usize {
        t * self.grid.n_phi() + p
    }

    #[inline]
    pub fn power_at(&self, t: usize, p: usize) -> f64 {
        self.power[self.index(t, p)]
    }

    #[inline]
    pub fn field_at(&self, t: usize, p: usize) -> Complex64 {
        self.field[self.index(t, p)]
    }

    /// Writes the pattern as CSV, theta-major, 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "theta_deg,phi_deg,power,power_db,field_re,field_im")?;
        for (t, &theta) in self.grid.theta().iter().enumerate() {
            for (p, &phi) in self.grid.phi().iter().enumerate() {
                let k = self.index(t, p);
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    fmt_sig9(theta),
                    fmt_sig9(phi),
                    fmt_sig9(self.power[k]),
                    fmt_sig9(self.power_db[k]),
                    fmt_sig9(self.field[k].re),
                    fmt_sig9(self.field[k].im),
                )?;
            }
        }
        Ok(())
    }
}

/// `%.9g`-style formatting.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.8e}");
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{mantissa}e{e}")
    }
}

fn state_phasors(n_states: u16) -> Vec<Complex64> {
    (0..n_states)
        .map(|s| Complex64::from_polar(1.0, phase_of_state(UnitCellState::new(s, n_states).unwrap(), n_states)))
        .collect()
}

/// Direct evaluation of the double sum at every grid point.
///
/// Elevation rows are evaluated in parallel; every point is an independent
/// sum in fixed cell order, so the result does not depend on the thread
/// count.
pub fn compute_pattern(
    config: &MsfConfig,
    params: &PhysicalParams,
    grid: &AngularGrid,
) -> RadiationPattern {
    let k0 = params.wave_number();
    let q = config.n_states();
    let phases: Vec<f64> = config
        .states()
        .iter()
        .map(|&s| phase_of_state(UnitCellState::new(s, q).unwrap(), q))
        .collect();
    let trig_phi: Vec<(f64, f64)> = grid.phi().iter().map(|p| p.to_radians().sin_cos()).collect();
    let field: Vec<Complex64> = grid
        .theta()
        .par_iter()
        .flat_map_iter(|&theta| {
            let st = theta.to_radians().sin();
            let phases = &phases;
            trig_phi.iter().map(move |&(sp, cp)| {
                let (u, v) = (st * cp, st * sp);
                let mut acc = Complex64::new(0.0, 0.0);
                for row in 0..config.n_rows() {
                    for col in 0..config.n_cols() {
                        let zeta = path_difference(col + 1, row + 1, u, v, params.cell_pitch());
                        let arg = phases[row * config.n_cols() + col] + k0 * zeta;
                        acc += Complex64::from_polar(1.0, arg);
                    }
                }
                acc * params.reflection_amplitude()
            })
        })
        .collect();
    RadiationPattern::from_field(grid.clone(), field).expect("analytical pattern is well formed")
}

pub fn compute_pattern_fast(
    config: &MsfConfig,
    params: &PhysicalParams,
    grid: &AngularGrid,
) -> RadiationPattern {
    FarFieldPlan::new(params, grid, config.n_rows(), config.n_cols()).compute(config)
}

/// Precomputed phasor tables for one (params, grid, surface size) triple.
///
/// With `u = k0 D_u sin(theta) cos(phi)` and `v = k0 D_u sin(theta) sin(phi)`
/// the field factors as `E = K sum_j e^{jv(j-1/2)} sum_i S_ij e^{ju(i-1/2)}`.
/// The column phasors of all grid points form a `P x 2M` real matrix
/// `[Re | Im]`; the inner sums for every row of the surface then come out of
/// one `P x 2M` by `2M x 2N` product.
#[derive(Debug, Clone)]
pub struct FarFieldPlan {
    params: PhysicalParams,
    grid: AngularGrid,
    n_rows: usize,
    n_cols: usize,
    col_phasors: Array2<f64>,
    row_phasors: Vec<Complex64>,
}

impl FarFieldPlan {
    pub fn new(params: &PhysicalParams, grid: &AngularGrid, n_rows: usize, n_cols: usize) -> Self {
        let k0d = params.wave_number() * params.cell_pitch();
        let n_points = grid.len();
        let mut col_phasors = Array2::<f64>::zeros((n_points, 2 * n_cols));
        let mut row_phasors = Vec::with_capacity(n_points * n_rows);
        let trig_phi: Vec<(f64, f64)> = grid
            .phi()
            .iter()
            .map(|p| p.to_radians().sin_cos())
            .collect();
        let mut k = 0;
        for &theta in grid.theta() {
            let st = theta.to_radians().sin();
            for &(sp, cp) in &trig_phi {
                let u = k0d * st * cp;
                let v = k0d * st * sp;
                let mut row = col_phasors.row_mut(k);
                for i in 0..n_cols {
                    let c = Complex64::from_polar(1.0, u * (i as f64 + 0.5));
                    row[i] = c.re;
                    row[n_cols + i] = c.im;
                }
                for j in 0..n_rows {
                    row_phasors.push(Complex64::from_polar(1.0, v * (j as f64 + 0.5)));
                }
                k += 1;
            }
        }
        Self {
            params: *params,
            grid: grid.clone(),
            n_rows,
            n_cols,
            col_phasors,
            row_phasors,
        }
    }

    pub fn grid(&self) -> &AngularGrid {
        &self.grid
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    pub fn compute(&self, config: &MsfConfig) -> RadiationPattern {
        assert_eq!(
            (config.n_rows(), config.n_cols()),
            (self.n_rows, self.n_cols),
            "configuration size does not match the far-field plan"
        );
        let (n, m) = (self.n_rows, self.n_cols);
        let phasors = state_phasors(config.n_states());
        // Block matrix [[Sr, Si], [-Si, Sr]] (2M x 2N), S indexed (col i, row j).
        let mut s_mat = Array2::<f64>::zeros((2 * m, 2 * n));
        for j in 0..n {
            for i in 0..m {
                let s = phasors[usize::from(config.states()[j * m + i])];
                s_mat[[i, j]] = s.re;
                s_mat[[i, n + j]] = s.im;
                s_mat[[m + i, j]] = -s.im;
                s_mat[[m + i, n + j]] = s.re;
            }
        }
        let inner = self.col_phasors.dot(&s_mat);
        let amp = self.params.reflection_amplitude();
        let field: Vec<Complex64> = inner
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(k, row)| {
                let rp = &self.row_phasors[k * n..(k + 1) * n];
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    acc += rp[j] * Complex64::new(row[j], row[n + j]);
                }
                acc * amp
            })
            .collect();
        RadiationPattern::from_field(self.grid.clone(), field)
            .expect("analytical pattern is well formed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PhysicalParams {
        PhysicalParams::default()
    }

    #[test]
    fn phase_map_examples() {
        let s = |v| UnitCellState::new(v, 8).unwrap();
        assert_eq!(phase_of_state(s(0), 8), 0.0);
        assert!((phase_of_state(s(4), 8) - PI).abs() < 1e-15);
        assert!((phase_of_state(s(3), 8) - 3.0 * PI / 4.0).abs() < 1e-15);
    }

    #[test]
    fn phase_shift_examples() {
        let p = params();
        for (i, j) in [(1, 1), (5, 9), (12, 12)] {
            assert_eq!(relative_phase_shift(i, j, 0.0, 1.3, &p), 0.0);
        }
        let z = relative_phase_shift(1, 1, 90f64.to_radians(), 0.0, &p);
        assert!((z - 0.25).abs() < 1e-15);
    }

    #[test]
    fn phase_shift_matches_position_dot_direction() {
        // Second route: position vector of the cell centre dotted with the
        // unit propagation direction.
        let p = params();
        let (theta, phi) = (30f64.to_radians(), 45f64.to_radians());
        let pos = [(12.0 - 0.5) * 0.5, (12.0 - 0.5) * 0.5, 0.0];
        let dir = [
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        ];
        let dot: f64 = pos.iter().zip(dir).map(|(a, b)| a * b).sum();
        let z = relative_phase_shift(12, 12, theta, phi, &p);
        assert!((z - dot).abs() < 1e-13, "{z} vs {dot}");
    }

    #[test]
    fn single_cell_has_unit_modulus_everywhere() {
        let grid = AngularGrid::new(5.0, 5.0).unwrap();
        for s in 0..8 {
            let cfg = MsfConfig::uniform(1, 1, 8, s).unwrap();
            let pat = compute_pattern(&cfg, &params(), &grid);
            assert!(pat.field().iter().all(|e| (e.norm() - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn uniform_broadside_is_coherent_sum() {
        let grid = AngularGrid::new(1.0, 1.0).unwrap();
        let cfg = MsfConfig::uniform(12, 12, 8, 3).unwrap();
        for pat in [
            compute_pattern(&cfg, &params(), &grid),
            compute_pattern_fast(&cfg, &params(), &grid),
        ] {
            for p in 0..pat.n_phi() {
                assert!((pat.field_at(0, p).norm() - 144.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reflection_amplitude_scales_field() {
        let grid = AngularGrid::new(10.0, 10.0).unwrap();
        let cfg = MsfConfig::uniform(4, 4, 8, 0).unwrap();
        let p2 = PhysicalParams::new(1.0, 0.5, 2.0).unwrap();
        let a = compute_pattern(&cfg, &params(), &grid);
        let b = compute_pattern(&cfg, &p2, &grid);
        for (x, y) in a.field().iter().zip(b.field()) {
            assert!((x * 2.0 - y).norm() < 1e-12);
        }
        assert_eq!(a.power_db(), b.power_db());
    }

    #[test]
    fn power_db_is_peak_normalized() {
        let grid = AngularGrid::new(2.0, 2.0).unwrap();
        let cfg = MsfConfig::from_rows(&[vec![0, 1, 2], vec![5, 6, 7]], 8).unwrap();
        let pat = compute_pattern(&cfg, &params(), &grid);
        let max = pat.power_db().iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(max, 0.0);
        for (p, e) in pat.power().iter().zip(pat.field()) {
            assert_eq!(*p, e.norm_sqr());
        }
    }

    #[test]
    fn from_power_rejects_pole_inconsistency() {
        let grid = AngularGrid::new(30.0, 90.0).unwrap();
        let mut power = vec![1.0; grid.len()];
        power[1] = 0.5;
        assert!(RadiationPattern::from_power(grid, &power).is_err());
    }

    #[test]
    fn csv_header_and_row_count() {
        let grid = AngularGrid::new(30.0, 90.0).unwrap();
        let cfg = MsfConfig::uniform(2, 2, 8, 0).unwrap();
        let pat = compute_pattern(&cfg, &params(), &grid);
        let mut buf = Vec::new();
        pat.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "theta_deg,phi_deg,power,power_db,field_re,field_im");
        assert_eq!(lines.len(), 1 + grid.len());
        assert!(lines[1].starts_with("0,0,16,0,4,"));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(144.0), "144");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(-13.26), "-13.26");
        assert_eq!(fmt_sig9(1.5e-9), "1.5e-9");
        assert_eq!(fmt_sig9(123456789012.0), "1.23456789e11");
    }
}
