//! Domain types shared by every stage of the pipeline: the coding
//! configuration, the physical constants of the surface and the angular
//! sampling grid, plus the canonical configuration file format.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ROWS: usize = 12;
pub const DEFAULT_COLS: usize = 12;
pub const DEFAULT_STATES: u16 = 8;

/// One unit-cell code, `0 <= state < Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitCellState(u16);

impl UnitCellState {
    pub fn new(state: u16, n_states: u16) -> Result<Self> {
        if state >= n_states {
            return Err(Error::Validation(format!(
                "state {state} out of range for Q = {n_states}"
            )));
        }
        Ok(Self(state))
    }

    pub fn get(self) -> u16 {
        self.0
    }
}

/// N x M matrix of unit-cell states, stored row-major.
///
/// Cell `(i, j)` of the far-field sum uses `i` as the 1-based column index
/// (x axis, the `phi = 0` direction) and `j` as the 1-based row index
/// (y axis).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MsfConfig {
    n_rows: usize,
    n_cols: usize,
    n_states: u16,
    states: Vec<u16>,
}

impl MsfConfig {
    pub fn new(n_rows: usize, n_cols: usize, n_states: u16, states: Vec<u16>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::Validation(format!(
                "configuration must be non-empty, got {n_rows}x{n_cols}"
            )));
        }
        if n_states == 0 {
            return Err(Error::Validation("n_states must be positive".into()));
        }
        if states.len() != n_rows * n_cols {
            return Err(Error::Validation(format!(
                "expected {} states for a {n_rows}x{n_cols} configuration, got {}",
                n_rows * n_cols,
                states.len()
            )));
        }
        if let Some(pos) = states.iter().position(|&s| s >= n_states) {
            return Err(Error::Validation(format!(
                "cell (row {}, col {}) has state {}, expected < {n_states}",
                pos / n_cols,
                pos % n_cols,
                states[pos]
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            n_states,
            states,
        })
    }

    /// Every cell set to `state`.
    pub fn uniform(n_rows: usize, n_cols: usize, n_states: u16, state: u16) -> Result<Self> {
        Self::new(n_rows, n_cols, n_states, vec![state; n_rows * n_cols])
    }

    pub fn from_rows(rows: &[Vec<u16>], n_states: u16) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != n_cols) {
            return Err(Error::Validation(format!(
                "row {r} has {} entries, expected {n_cols}",
                rows[r].len()
            )));
        }
        Self::new(n_rows, n_cols, n_states, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_states(&self) -> u16 {
        self.n_states
    }

    pub fn n_cells(&self) -> usize {
        self.states.len()
    }

    /// Row-major state array.
    pub fn states(&self) -> &[u16] {
        &self.states
    }

    pub fn state(&self, row: usize, col: usize) -> UnitCellState {
        UnitCellState(self.states[row * self.n_cols + col])
    }

    pub fn set_state(&mut self, row: usize, col: usize, state: u16) -> Result<()> {
        if state >= self.n_states {
            return Err(Error::Validation(format!(
                "state {state} out of range for Q = {}",
                self.n_states
            )));
        }
        self.states[row * self.n_cols + col] = state;
        Ok(())
    }

    pub(crate) fn states_mut(&mut self) -> &mut [u16] {
        &mut self.states
    }

    /// Adds `shift` to every state modulo Q.
    pub fn shifted(&self, shift: u16) -> Self {
        let q = self.n_states;
        let states = self.states.iter().map(|&s| (s + shift % q) % q).collect();
        Self {
            states,
            ..self.clone()
        }
    }

    /// Phase-conjugate configuration, `s -> (Q - s) mod Q`.
    pub fn conjugated(&self) -> Self {
        let q = self.n_states;
        let states = self.states.iter().map(|&s| (q - s) % q).collect();
        Self {
            states,
            ..self.clone()
        }
    }

    pub fn rows(&self) -> Vec<Vec<u16>> {
        self.states.chunks(self.n_cols).map(<[u16]>::to_vec).collect()
    }

    /// Canonical JSON text: keys in fixed order, rows outer, no floats,
    /// terminated by a newline.
    pub fn to_canonical_json(&self) -> String {
        let file = ConfigFile {
            n_rows: self.n_rows as i64,
            n_cols: self.n_cols as i64,
            n_states: i64::from(self.n_states),
            states: self
                .rows()
                .into_iter()
                .map(|r| r.into_iter().map(i64::from).collect())
                .collect(),
        };
        let mut text = serde_json::to_string(&file).expect("config serialization is infallible");
        text.push('\n');
        text
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ConfigFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        file.into_config()
    }
}

impl fmt::Display for MsfConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.states.chunks(self.n_cols) {
            let line: Vec<String> = row.iter().map(u16::to_string).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    n_rows: i64,
    n_cols: i64,
    n_states: i64,
    states: Vec<Vec<i64>>,
}

impl ConfigFile {
    fn into_config(self) -> Result<MsfConfig> {
        if self.n_rows <= 0 || self.n_cols <= 0 || self.n_states <= 0 {
            return Err(Error::Validation(format!(
                "dimensions must be positive, got n_rows={} n_cols={} n_states={}",
                self.n_rows, self.n_cols, self.n_states
            )));
        }
        if self.n_states > i64::from(u16::MAX) {
            return Err(Error::Validation(format!("n_states {} too large", self.n_states)));
        }
        let (n_rows, n_cols) = (self.n_rows as usize, self.n_cols as usize);
        let n_states = self.n_states as u16;
        if self.states.len() != n_rows {
            return Err(Error::Validation(format!(
                "declared {n_rows} rows but found {}",
                self.states.len()
            )));
        }
        let mut flat = Vec::with_capacity(n_rows * n_cols);
        for (r, row) in self.states.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::Validation(format!(
                    "row {r} has {} entries, declared {n_cols} columns",
                    row.len()
                )));
            }
            for (c, &s) in row.iter().enumerate() {
                if s < 0 || s >= i64::from(n_states) {
                    return Err(Error::Validation(format!(
                        "cell (row {r}, col {c}) has state {s}, expected 0..{}",
                        n_states - 1
                    )));
                }
                flat.push(s as u16);
            }
        }
        MsfConfig::new(n_rows, n_cols, n_states, flat)
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<MsfConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MsfConfig::from_json_str(&text)
}

pub fn save_config(config: &MsfConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, config.to_canonical_json()).map_err(|e| Error::io(path, e))
}

/// Physical constants of the surface.
///
/// Defaults: wavelength 1 (normalized length unit), half-wavelength cell
/// pitch and unit reflection amplitude. `K` scales every field value but
/// cancels in all four beam measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PhysicalParamsRaw")]
pub struct PhysicalParams {
    wavelength: f64,
    cell_pitch: f64,
    reflection_amplitude: f64,
}

#[derive(Deserialize)]
struct PhysicalParamsRaw {
    wavelength: f64,
    cell_pitch: f64,
    reflection_amplitude: f64,
}

impl TryFrom<PhysicalParamsRaw> for PhysicalParams {
    type Error = Error;

    fn try_from(raw: PhysicalParamsRaw) -> Result<Self> {
        Self::new(raw.wavelength, raw.cell_pitch, raw.reflection_amplitude)
    }
}

impl PhysicalParams {
    pub fn new(wavelength: f64, cell_pitch: f64, reflection_amplitude: f64) -> Result<Self> {
        for (name, v) in [
            ("wavelength", wavelength),
            ("cell_pitch", cell_pitch),
            ("reflection_amplitude", reflection_amplitude),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            wavelength,
            cell_pitch,
            reflection_amplitude,
        })
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn cell_pitch(&self) -> f64 {
        self.cell_pitch
    }

    pub fn reflection_amplitude(&self) -> f64 {
        self.reflection_amplitude
    }

    /// `k0 = 2 pi / lambda`.
    pub fn wave_number(&self) -> f64 {
        2.0 * PI / self.wavelength
    }
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            wavelength: 1.0,
            cell_pitch: 0.5,
            reflection_amplitude: 1.0,
        }
    }
}

/// Upper-hemisphere sampling grid, uniform in both angles.
///
/// Elevation runs over `[0, 90]` inclusive, azimuth over `[0, 360)`. The
/// azimuth count must be even so that every cut has its `phi + 180` partner
/// on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AngularGridRaw", into = "AngularGridRaw")]
pub struct AngularGrid {
    theta_step: f64,
    phi_step: f64,
    theta: Vec<f64>,
    phi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AngularGridRaw {
    theta_step_deg: f64,
    phi_step_deg: f64,
}

impl TryFrom<AngularGridRaw> for AngularGrid {
    type Error = Error;

    fn try_from(raw: AngularGridRaw) -> Result<Self> {
        Self::new(raw.theta_step_deg, raw.phi_step_deg)
    }
}

impl From<AngularGrid> for AngularGridRaw {
    fn from(g: AngularGrid) -> Self {
        Self {
            theta_step_deg: g.theta_step,
            phi_step_deg: g.phi_step,
        }
    }
}

fn whole_divisions(span: f64, step: f64) -> Option<usize> {
    let n = span / step;
    let r = n.round();
    ((n - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
}

impl AngularGrid {
    pub fn new(theta_step_deg: f64, phi_step_deg: f64) -> Result<Self> {
        if !(theta_step_deg > 0.0 && phi_step_deg > 0.0) {
            return Err(Error::Validation("grid steps must be positive".into()));
        }
        let n_theta = whole_divisions(90.0, theta_step_deg).ok_or_else(|| {
            Error::Validation(format!("theta step {theta_step_deg} must divide 90"))
        })?;
        let n_phi = whole_divisions(360.0, phi_step_deg).ok_or_else(|| {
            Error::Validation(format!("phi step {phi_step_deg} must divide 360"))
        })?;
        if n_phi % 2 != 0 || n_phi < 4 {
            return Err(Error::Validation(format!(
                "phi step {phi_step_deg} gives {n_phi} samples; need an even count >= 4"
            )));
        }
        if n_theta < 2 {
            return Err(Error::Validation("need at least 3 theta samples".into()));
        }
        let theta = (0..=n_theta).map(|k| k as f64 * theta_step_deg).collect();
        let phi = (0..n_phi).map(|k| k as f64 * phi_step_deg).collect();
        Ok(Self {
            theta_step: theta_step_deg,
            phi_step: phi_step_deg,
            theta,
            phi,
        })
    }

    /// Square grid with the same step in both axes.
    pub fn with_resolution(step_deg: f64) -> Result<Self> {
        Self::new(step_deg, step_deg)
    }

    pub fn theta_step(&self) -> f64 {
        self.theta_step
    }

    pub fn phi_step(&self) -> f64 {
        self.phi_step
    }

    /// Elevation samples in degrees.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Azimuth samples in degrees.
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn n_theta(&self) -> usize {
        self.theta.len()
    }

    pub fn n_phi(&self) -> usize {
        self.phi.len()
    }

    pub fn len(&self) -> usize {
        self.theta.len() * self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for AngularGrid {
    fn default() -> Self {
        Self::new(1.0, 1.0).expect("1 degree grid is valid")
    }
}

/// Wraps an azimuth in degrees into `[0, 360)`.
pub fn wrap_degrees(phi: f64) -> f64 {
    let w = phi.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}
