//! The four beam measures: directivity, principal-to-side-lobe ratio,
//! direction of maximum radiation and half-power beam width.
//!
//! Lobes are found by steepest-ascent basin labeling on the sampled power
//! grid. The grid is treated as a graph whose nodes are the samples with
//! `theta > 0` plus a single pole node standing in for every `theta = 0`
//! sample. Each node is linked to its 8-neighborhood with azimuth wrapping;
//! the pole is linked to the whole first ring.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::f64::consts::PI;

use crate::domain::{wrap_degrees, AngularGrid, MsfConfig, PhysicalParams};
use crate::error::{Error, Result};
use crate::farfield::{FarFieldPlan, RadiationPattern};

/// Relative power spread below which a pattern is treated as flat.
const DEGENERATE_RTOL: f64 = 1e-12;

/// Target vector of the surrogate models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternMeasures {
    pub directivity_db: f64,
    #[serde(serialize_with = "ser_db_or_inf", deserialize_with = "de_db_or_inf")]
    pub pslr_db: f64,
    pub theta_max_deg: f64,
    pub phi_max_deg: f64,
    pub hpbw_deg: f64,
}

/// Names of the five regression targets, in vector order.
pub const MEASURE_NAMES: [&str; 5] = [
    "directivity_db",
    "pslr_db",
    "theta_max_deg",
    "phi_max_deg",
    "hpbw_deg",
];

impl PatternMeasures {
    pub fn to_array(&self) -> [f64; 5] {
        [
            self.directivity_db,
            self.pslr_db,
            self.theta_max_deg,
            self.phi_max_deg,
            self.hpbw_deg,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            directivity_db: v[0],
            pslr_db: v[1],
            theta_max_deg: v[2],
            phi_max_deg: v[3],
            hpbw_deg: v[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn ser_db_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *v == f64::INFINITY {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db_or_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t:?}"))),
    }
}

/// Peak of one basin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LobePeak {
    pub theta_idx: usize,
    pub phi_idx: usize,
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub power: f64,
}

/// Basin labeling of a pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct LobeMap {
    /// Basin id per grid sample, theta-major.
    pub labels: Vec<usize>,
    /// One peak per basin, indexed by basin id. Peaks are ordered by
    /// `(theta_idx, phi_idx)`, the pole peak reported at `(0, 0)`.
    pub peaks: Vec<LobePeak>,
    pub main_basin_id: usize,
    /// Set when the whole pattern is flat and collapsed to one basin.
    pub degenerate: bool,
}

impl LobeMap {
    pub fn n_basins(&self) -> usize {
        self.peaks.len()
    }
}

/// Node graph over the sampling grid: id 0 is the pole, id `1 + (t-1) n_phi + p`
/// is sample `(t, p)` with `t >= 1`.
struct PoleGraph {
    n_theta: usize,
    n_phi: usize,
}

impl PoleGraph {
    fn n_nodes(&self) -> usize {
        1 + (self.n_theta - 1) * self.n_phi
    }

    fn coords(&self, node: usize) -> (usize, usize) {
        if node == 0 {
            (0, 0)
        } else {
            (1 + (node - 1) / self.n_phi, (node - 1) % self.n_phi)
        }
    }

    fn node(&self, t: usize, p: usize) -> usize {
        if t == 0 {
            0
        } else {
            1 + (t - 1) * self.n_phi + p
        }
    }

    fn neighbors(&self, node: usize, out: &mut Vec<usize>) {
        out.clear();
        if node == 0 {
            out.extend((0..self.n_phi).map(|p| self.node(1, p)));
            return;
        }
        let (t, p) = self.coords(node);
        for dt in [-1i64, 0, 1] {
            let tt = t as i64 + dt;
            if tt < 0 || tt as usize >= self.n_theta {
                continue;
            }
            for dp in [-1i64, 0, 1] {
                if dt == 0 && dp == 0 {
                    continue;
                }
                let pp = (p as i64 + dp).rem_euclid(self.n_phi as i64) as usize;
                let nb = self.node(tt as usize, pp);
                if !out.contains(&nb) {
                    out.push(nb);
                }
            }
        }
    }
}

/// Steepest-ascent basin labeling.
///
/// Every node moves to its highest-power neighbor while that neighbor is
/// strictly higher; ties between neighbors go to the lowest `(theta_idx,
/// phi_idx)`. Nodes that reach the same local maximum share a basin.
pub fn detect_lobes(pattern: &RadiationPattern) -> Result<LobeMap> {
    let (n_theta, n_phi) = (pattern.n_theta(), pattern.n_phi());
    if n_theta < 3 || n_phi < 3 {
        return Err(Error::Validation(format!(
            "lobe detection needs at least 3x3 samples, got {n_theta}x{n_phi}"
        )));
    }
    let graph = PoleGraph { n_theta, n_phi };
    let power = pattern.power();
    let node_power = |node: usize| {
        let (t, p) = graph.coords(node);
        power[t * n_phi + p]
    };
    let grid = pattern.grid();
    let peak_of = |node: usize| {
        let (t, p) = graph.coords(node);
        LobePeak {
            theta_idx: t,
            phi_idx: p,
            theta_deg: grid.theta()[t],
            phi_deg: grid.phi()[p],
            power: power[t * n_phi + p],
        }
    };

    let (lo, hi) = power
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= DEGENERATE_RTOL * hi {
        let top = (0..graph.n_nodes())
            .max_by(|&a, &b| node_power(a).total_cmp(&node_power(b)).then(b.cmp(&a)))
            .unwrap_or(0);
        return Ok(LobeMap {
            labels: vec![0; power.len()],
            peaks: vec![peak_of(top)],
            main_basin_id: 0,
            degenerate: true,
        });
    }

    // Ascent pointer per node (itself for local maxima). Node ids increase
    // with (t, p), so the lowest id among equal neighbors is the
    // lexicographic tie-break.
    let n_nodes = graph.n_nodes();
    let mut next = vec![0usize; n_nodes];
    let mut nbs = Vec::with_capacity(n_phi.max(8));
    for node in 0..n_nodes {
        graph.neighbors(node, &mut nbs);
        let own = node_power(node);
        let mut best = node;
        let mut best_power = own;
        for &nb in &nbs {
            let pw = node_power(nb);
            if pw > best_power || (pw == best_power && best != node && nb < best) {
                best = nb;
                best_power = pw;
            }
        }
        next[node] = if best_power > own { best } else { node };
    }

    // Resolve each node to its terminal maximum.
    const UNSET: usize = usize::MAX;
    let mut root = vec![UNSET; n_nodes];
    let mut path = Vec::new();
    for start in 0..n_nodes {
        let mut cur = start;
        while root[cur] == UNSET && next[cur] != cur {
            path.push(cur);
            cur = next[cur];
        }
        let r = if root[cur] == UNSET { cur } else { root[cur] };
        root[cur] = r;
        for &n in &path {
            root[n] = r;
        }
        path.clear();
    }

    let mut maxima: Vec<usize> = (0..n_nodes).filter(|&n| next[n] == n).collect();
    maxima.sort_unstable();
    let mut basin_of = vec![UNSET; n_nodes];
    for (b, &m) in maxima.iter().enumerate() {
        basin_of[m] = b;
    }
    let peaks: Vec<LobePeak> = maxima.iter().map(|&m| peak_of(m)).collect();
    let mut labels = vec![0usize; power.len()];
    for t in 0..n_theta {
        for p in 0..n_phi {
            labels[t * n_phi + p] = basin_of[root[graph.node(t, p)]];
        }
    }
    let main_basin_id = peaks
        .iter()
        .enumerate()
        .fold(0, |best, (b, pk)| if pk.power > peaks[best].power { b } else { best });
    Ok(LobeMap {
        labels,
        peaks,
        main_basin_id,
        degenerate: false,
    })
}

/// Integral of `P sin(theta)` over the sampled hemisphere (trapezoid in theta,
/// periodic rectangle rule in phi).
pub fn hemisphere_power(pattern: &RadiationPattern) -> f64 {
    let grid = pattern.grid();
    let d_theta = grid.theta_step().to_radians();
    let d_phi = grid.phi_step().to_radians();
    let last = grid.n_theta() - 1;
    let mut total = 0.0;
    for (t, theta) in grid.theta().iter().enumerate() {
        let w = if t == 0 || t == last { 0.5 } else { 1.0 };
        let ring: f64 = (0..grid.n_phi()).map(|p| pattern.power_at(t, p)).sum();
        total += w * theta.to_radians().sin() * ring;
    }
    total * d_theta * d_phi
}

/// Directivity in dB: `4 pi P_max / integral(P dOmega)` over the upper hemisphere.
pub fn directivity(pattern: &RadiationPattern) -> Result<f64> {
    let total = hemisphere_power(pattern);
    if !(total > 0.0) {
        return Err(Error::Numeric("zero radiated power".into()));
    }
    Ok(10.0 * (4.0 * PI * pattern.peak_power() / total).log10())
}

/// Principal-to-side-lobe ratio in dB; `+inf` when only one basin exists.
pub fn pslr(lobes: &LobeMap) -> f64 {
    let main = lobes.peaks[lobes.main_basin_id].power;
    let second = lobes
        .peaks
        .iter()
        .enumerate()
        .filter(|(b, _)| *b != lobes.main_basin_id)
        .map(|(_, p)| p.power)
        .fold(f64::NEG_INFINITY, f64::max);
    if second == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    if second <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (main / second).log10()
}

/// Vertex offset of the parabola through `(-1, a), (0, b), (1, c)`, clamped
/// to half a sample.
fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom < 0.0 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Grid index of the global power maximum (first in theta-major order).
pub fn argmax(pattern: &RadiationPattern) -> (usize, usize) {
    let k = pattern
        .power()
        .iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > pattern.power()[best] { k } else { best });
    (k / pattern.n_phi(), k % pattern.n_phi())
}

/// Direction of maximum radiation in degrees, refined by independent
/// parabolic fits (in dB) along theta and phi.
pub fn max_direction(pattern: &RadiationPattern) -> (f64, f64) {
    let grid = pattern.grid();
    let (t, p) = argmax(pattern);
    if t == 0 {
        return (0.0, 0.0);
    }
    let n_phi = grid.n_phi();
    let db = |t: usize, p: usize| pattern.power_db()[t * n_phi + p];
    let mut theta = grid.theta()[t];
    if t + 1 < grid.n_theta() {
        theta += parabolic_offset(db(t - 1, p), db(t, p), db(t + 1, p)) * grid.theta_step();
    }
    let theta = theta.clamp(0.0, 90.0);
    let prev = (p + n_phi - 1) % n_phi;
    let next = (p + 1) % n_phi;
    let phi = wrap_degrees(
        grid.phi()[p] + parabolic_offset(db(t, prev), db(t, p), db(t, next)) * grid.phi_step(),
    );
    if theta < grid.theta_step() {
        (theta, 0.0)
    } else {
        (theta, phi)
    }
}

/// Half-power beam width along one elevation cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamWidth {
    pub width_deg: f64,
    /// True if a -3 dB crossing was missing on at least one side and the
    /// width was clamped at the edge of the cut.
    pub clamped: bool,
}

/// HPBW on the great-circle cut through `phi_max`, continued across the pole
/// onto `phi_max + 180`.
pub fn hpbw(pattern: &RadiationPattern, direction: (f64, f64)) -> BeamWidth {
    let grid = pattern.grid();
    let (n_theta, n_phi) = (grid.n_theta(), grid.n_phi());
    let pa = ((direction.1 / grid.phi_step()).round() as usize) % n_phi;
    let pb = (pa + n_phi / 2) % n_phi;

    // Signed elevation s in [-90, 90]; negative side lies on phi_max + 180.
    let mut s = Vec::with_capacity(2 * n_theta - 1);
    let mut pw = Vec::with_capacity(2 * n_theta - 1);
    for t in (1..n_theta).rev() {
        s.push(-grid.theta()[t]);
        pw.push(pattern.power_at(t, pb));
    }
    for t in 0..n_theta {
        s.push(grid.theta()[t]);
        pw.push(pattern.power_at(t, pa));
    }

    // Start at the sample nearest the peak and climb to the local maximum.
    let mut c = (n_theta - 1) + ((direction.0 / grid.theta_step()).round() as usize).min(n_theta - 1);
    loop {
        let left = if c > 0 { pw[c - 1] } else { f64::NEG_INFINITY };
        let right = pw.get(c + 1).copied().unwrap_or(f64::NEG_INFINITY);
        if left > pw[c] && left >= right {
            c -= 1;
        } else if right > pw[c] {
            c += 1;
        } else {
            break;
        }
    }
    let half = 0.5 * pw[c];
    let crossing = |k_in: usize, k_out: usize| {
        let (p0, p1) = (pw[k_in], pw[k_out]);
        let f = (p0 - half) / (p0 - p1);
        s[k_in] + f * (s[k_out] - s[k_in])
    };

    let mut clamped = false;
    let mut k = c;
    let left = loop {
        if k == 0 {
            clamped = true;
            break s[0];
        }
        if pw[k - 1] <= half {
            break crossing(k, k - 1);
        }
        k -= 1;
    };
    let mut k = c;
    let right = loop {
        if k + 1 == s.len() {
            clamped = true;
            break s[k];
        }
        if pw[k + 1] <= half {
            break crossing(k, k + 1);
        }
        k += 1;
    };
    BeamWidth {
        width_deg: right - left,
        clamped,
    }
}

/// Measures plus the diagnostic flags raised while extracting them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureReport {
    pub measures: PatternMeasures,
    pub n_lobes: usize,
    pub degenerate: bool,
    pub hpbw_clamped: bool,
}

pub fn measure_pattern(pattern: &RadiationPattern) -> Result<MeasureReport> {
    let lobes = detect_lobes(pattern)?;
    let directivity_db = directivity(pattern)?;
    let pslr_db = pslr(&lobes);
    let direction = max_direction(pattern);
    let width = hpbw(pattern, direction);
    Ok(MeasureReport {
        measures: PatternMeasures {
            directivity_db,
            pslr_db,
            theta_max_deg: direction.0,
            phi_max_deg: direction.1,
            hpbw_deg: width.width_deg,
        },
        n_lobes: lobes.n_basins(),
        degenerate: lobes.degenerate,
        hpbw_clamped: width.clamped,
    })
}

/// Ground-truth measures of a configuration: fast pattern, lobe detection and
/// the four measure extractors.
pub fn extract_measures(
    config: &MsfConfig,
    params: &PhysicalParams,
    grid: &AngularGrid,
) -> Result<PatternMeasures> {
    let plan = FarFieldPlan::new(params, grid, config.n_rows(), config.n_cols());
    Ok(measure_pattern(&plan.compute(config))?.measures)
}

/// Same as [`extract_measures`] with a reusable plan.
pub fn extract_measures_with_plan(plan: &FarFieldPlan, config: &MsfConfig) -> Result<MeasureReport> {
    measure_pattern(&plan.compute(config))
}
