//! Far-field engine and measure extraction against independent oracles:
//! direct summation, brute-force local-maxima scans and classical
//! uniform-array formulas.

use std::f64::consts::PI;

use msfnet::datagen::generate_steering_config;
use msfnet::farfield::{compute_pattern, compute_pattern_fast, RadiationPattern};
use msfnet::measures::{detect_lobes, extract_measures, max_direction, measure_pattern, pslr};
use msfnet::{AngularGrid, MsfConfig, PhysicalParams, SeededRng};
use num_complex::Complex64;
use proptest::prelude::*;

fn params() -> PhysicalParams {
    PhysicalParams::default()
}

fn random_config(seed: u64, n_rows: usize, n_cols: usize, q: u16) -> MsfConfig {
    let mut rng = SeededRng::new(seed);
    let states = (0..n_rows * n_cols).map(|_| rng.below(u64::from(q)) as u16).collect();
    MsfConfig::new(n_rows, n_cols, q, states).unwrap()
}

/// Pattern of arbitrary (unquantized) per-cell phases, summed directly from
/// position vectors: r_ij = D_u (i - 1/2, j - 1/2), k = k0 (sin t cos p, sin t sin p).
fn continuous_pattern(phase: &impl Fn(usize, usize) -> f64, n: usize, grid: &AngularGrid) -> RadiationPattern {
    let p = params();
    let k0 = p.wave_number();
    let mut field = Vec::with_capacity(grid.len());
    for &t in grid.theta() {
        for &ph in grid.phi() {
            let (t, ph) = (t.to_radians(), ph.to_radians());
            let kx = k0 * t.sin() * ph.cos();
            let ky = k0 * t.sin() * ph.sin();
            let mut acc = Complex64::new(0.0, 0.0);
            for row in 1..=n {
                for col in 1..=n {
                    let rx = p.cell_pitch() * (col as f64 - 0.5);
                    let ry = p.cell_pitch() * (row as f64 - 0.5);
                    acc += Complex64::from_polar(1.0, phase(col, row) + kx * rx + ky * ry);
                }
            }
            field.push(acc);
        }
    }
    RadiationPattern::from_field(grid.clone(), field).unwrap()
}

fn ideal_steering(theta_t: f64, phi_t: f64) -> impl Fn(usize, usize) -> f64 {
    let p = params();
    let k0d = p.wave_number() * p.cell_pitch();
    let (st, (sp, cp)) = (theta_t.to_radians().sin(), phi_t.to_radians().sin_cos());
    move |i, j| -k0d * st * ((i as f64 - 0.5) * cp + (j as f64 - 0.5) * sp)
}

/// Grid samples that are >= all of their 8 neighbours; the pole row is one
/// node adjacent to every sample of the first ring.
fn brute_force_maxima(pattern: &RadiationPattern) -> Vec<(usize, usize)> {
    let (nt, np) = (pattern.n_theta(), pattern.n_phi());
    let pw = |t: usize, p: usize| pattern.power_at(t, p);
    let mut out = Vec::new();
    if (0..np).all(|p| pw(0, 0) >= pw(1, p)) {
        out.push((0, 0));
    }
    for t in 1..nt {
        for p in 0..np {
            let here = pw(t, p);
            let mut is_max = true;
            for dt in [-1i64, 0, 1] {
                for dp in [-1i64, 0, 1] {
                    if dt == 0 && dp == 0 {
                        continue;
                    }
                    let tt = t as i64 + dt;
                    if tt < 0 || tt >= nt as i64 {
                        continue;
                    }
                    let pp = (p as i64 + dp).rem_euclid(np as i64) as usize;
                    let other = if tt == 0 { pw(0, 0) } else { pw(tt as usize, pp) };
                    if other > here {
                        is_max = false;
                    }
                }
            }
            if is_max {
                out.push((t, p));
            }
        }
    }
    out
}

#[test]
fn fast_path_matches_direct_summation_on_random_configs() {
    let grid = AngularGrid::default();
    for seed in 0..200 {
        let c = random_config(seed, 12, 12, 8);
        let fast = compute_pattern_fast(&c, &params(), &grid);
        let naive = compute_pattern(&c, &params(), &grid);
        let peak = naive.peak_power();
        for (a, b) in fast.power().iter().zip(naive.power()) {
            assert!((a - b).abs() <= 1e-6 * peak, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn uniform_broadside_is_exactly_coherent() {
    let grid = AngularGrid::default();
    for q in 0..8 {
        let c = MsfConfig::uniform(12, 12, 8, q).unwrap();
        for pattern in [compute_pattern(&c, &params(), &grid), compute_pattern_fast(&c, &params(), &grid)] {
            for p in 0..grid.n_phi() {
                assert!((pattern.field_at(0, p).norm() - 144.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn power_is_invariant_under_global_shift_and_mirrored_under_conjugation() {
    let grid = AngularGrid::default();
    for seed in 0..100 {
        let c = random_config(1000 + seed, 12, 12, 8);
        let base = compute_pattern_fast(&c, &params(), &grid);
        let shifted = compute_pattern_fast(&c.shifted(3), &params(), &grid);
        let conj = compute_pattern_fast(&c.conjugated(), &params(), &grid);
        let peak = base.peak_power();
        let (nt, np) = (grid.n_theta(), grid.n_phi());
        for t in 0..nt {
            for p in 0..np {
                assert!((base.power_at(t, p) - shifted.power_at(t, p)).abs() <= 1e-9 * peak);
                // Negated phases give the complex conjugate of the field at the
                // antipodal azimuth.
                let mirror = (p + np / 2) % np;
                assert!((base.power_at(t, p) - conj.power_at(t, mirror)).abs() <= 1e-9 * peak);
            }
        }
    }
}

#[test]
fn quantized_steering_lands_near_target() {
    let grid = AngularGrid::default();
    let c = generate_steering_config(30.0, 0.0, 12, 12, 8, &params()).unwrap();
    let (t, p) = max_direction(&compute_pattern_fast(&c, &params(), &grid));
    assert!((t - 30.0).abs() <= 2.0, "theta {t}");
    let dp = (p + 180.0).rem_euclid(360.0) - 180.0;
    assert!(dp.abs() <= 2.0, "phi {p}");
}

/// Argmax of the continuous-phase pattern over a 0.1 deg window around
/// `(theta0, phi0)`, plus a coarse full-hemisphere check that the window
/// holds the global maximum.
fn refined_argmax(phase: &impl Fn(usize, usize) -> f64, theta0: f64, phi0: f64) -> (f64, f64) {
    let coarse = continuous_pattern(phase, 12, &AngularGrid::with_resolution(1.0).unwrap());
    let (ct, cp) = max_direction(&coarse);
    assert!((ct - theta0).abs() <= 3.0 && ((cp - phi0 + 180.0).rem_euclid(360.0) - 180.0).abs() <= 3.0);
    let p = params();
    let k0 = p.wave_number();
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for a in -30..=30 {
        for b in -30..=30 {
            let (t, ph) = (theta0 + 0.1 * f64::from(a), phi0 + 0.1 * f64::from(b));
            let (tr, pr) = (t.to_radians(), ph.to_radians());
            let mut acc = Complex64::new(0.0, 0.0);
            for row in 1..=12 {
                for col in 1..=12 {
                    let path = p.cell_pitch() * tr.sin() * ((col as f64 - 0.5) * pr.cos() + (row as f64 - 0.5) * pr.sin());
                    acc += Complex64::from_polar(1.0, phase(col, row) + k0 * path);
                }
            }
            if acc.norm_sqr() > best.0 {
                best = (acc.norm_sqr(), t, ph);
            }
        }
    }
    (best.1, best.2)
}

#[test]
fn continuous_steering_oracles() {
    let (t, _) = refined_argmax(&ideal_steering(30.0, 0.0), 30.0, 0.0);
    assert!((t - 30.0).abs() <= 0.5, "theta {t}");
    let (t, p) = refined_argmax(&ideal_steering(30.0, 90.0), 30.0, 90.0);
    assert!((t - 30.0).abs() <= 0.5, "theta {t}");
    assert!((p - 90.0).abs() <= 1.0, "phi {p}");
}

#[test]
fn one_bit_steering_has_symmetric_image_lobe() {
    let grid = AngularGrid::default();
    let c = generate_steering_config(30.0, 0.0, 12, 12, 2, &params()).unwrap();
    let report = measure_pattern(&compute_pattern_fast(&c, &params(), &grid)).unwrap();
    let m = report.measures;
    assert!((m.theta_max_deg - 30.0).abs() <= 3.0, "theta {}", m.theta_max_deg);
    assert!(m.pslr_db < 1.0, "image lobe should match the main lobe, pslr {}", m.pslr_db);
}

#[test]
fn two_beam_checker_columns_give_mirrored_peaks() {
    let grid = AngularGrid::default();
    let rows: Vec<Vec<u16>> = (0..12).map(|_| (0..12).map(|i| if i % 2 == 0 { 0 } else { 4 }).collect()).collect();
    let c = MsfConfig::from_rows(&rows, 8).unwrap();
    let pattern = compute_pattern_fast(&c, &params(), &grid);
    let lobes = detect_lobes(&pattern).unwrap();
    assert!(lobes.n_basins() >= 2);
    let main = lobes.peaks[lobes.main_basin_id];
    let np = grid.n_phi();
    let mirror_p = (main.phi_idx + np / 2) % np;
    let mirror = lobes
        .peaks
        .iter()
        .find(|pk| pk.theta_idx == main.theta_idx && pk.phi_idx == mirror_p)
        .expect("mirror peak");
    assert!((mirror.power - main.power).abs() <= 1e-9 * main.power);
}

#[test]
fn basin_peaks_are_the_local_maxima() {
    let grid = AngularGrid::with_resolution(2.0).unwrap();
    for seed in 0..20 {
        let c = random_config(500 + seed, 12, 12, 8);
        let pattern = compute_pattern_fast(&c, &params(), &grid);
        let lobes = detect_lobes(&pattern).unwrap();
        let mut found: Vec<(usize, usize)> = lobes.peaks.iter().map(|p| (p.theta_idx, p.phi_idx)).collect();
        found.sort_unstable();
        let mut oracle = brute_force_maxima(&pattern);
        oracle.sort_unstable();
        assert_eq!(found, oracle, "seed {seed}");
    }
}

#[test]
fn pslr_matches_two_largest_maxima() {
    let grid = AngularGrid::default();
    for seed in 0..10 {
        let c = random_config(900 + seed, 12, 12, 8);
        let pattern = compute_pattern_fast(&c, &params(), &grid);
        let mut peaks: Vec<f64> =
            brute_force_maxima(&pattern).iter().map(|&(t, p)| pattern.power_at(t, p)).collect();
        peaks.sort_by(|a, b| b.total_cmp(a));
        let oracle = 10.0 * (peaks[0] / peaks[1]).log10();
        let got = pslr(&detect_lobes(&pattern).unwrap());
        assert!((got - oracle).abs() < 1e-9, "seed {seed}: {got} vs {oracle}");
    }
}

#[test]
fn uniform_measures_match_classical_formulas() {
    let c = MsfConfig::uniform(12, 12, 8, 0).unwrap();
    let m = extract_measures(&c, &params(), &AngularGrid::default()).unwrap();
    assert!((m.directivity_db - 10.0 * (PI * 144.0).log10()).abs() < 0.5, "{}", m.directivity_db);
    assert!((m.pslr_db - 13.26).abs() < 0.5, "{}", m.pslr_db);
    let hpbw = (0.886_f64 / 6.0).to_degrees();
    assert!((m.hpbw_deg - hpbw).abs() < 0.5, "{} vs {hpbw}", m.hpbw_deg);
    assert_eq!((m.theta_max_deg, m.phi_max_deg), (0.0, 0.0));
    // Global phase leaves the power pattern unchanged up to rounding.
    let again = extract_measures(&c.shifted(1), &params(), &AngularGrid::default()).unwrap();
    assert!(measures_close(&m, &again));
    assert_eq!(m, extract_measures(&c, &params(), &AngularGrid::default()).unwrap());
}

#[test]
fn steering_follows_projected_aperture() {
    let grid = AngularGrid::default();
    let broad = extract_measures(&MsfConfig::uniform(12, 12, 8, 0).unwrap(), &params(), &grid).unwrap();
    let c = generate_steering_config(30.0, 0.0, 12, 12, 8, &params()).unwrap();
    let steered = extract_measures(&c, &params(), &grid).unwrap();
    let expected = broad.directivity_db + 10.0 * 30f64.to_radians().cos().log10();
    assert!((steered.directivity_db - expected).abs() < 1.0, "{} vs {expected}", steered.directivity_db);
    let ratio = steered.hpbw_deg / broad.hpbw_deg / (1.0 / 30f64.to_radians().cos());
    assert!((ratio - 1.0).abs() < 0.15, "broadening ratio {ratio}");
}

#[test]
fn finer_grid_barely_moves_directivity() {
    let c = generate_steering_config(20.0, 45.0, 12, 12, 8, &params()).unwrap();
    let coarse = extract_measures(&c, &params(), &AngularGrid::default()).unwrap();
    let fine = extract_measures(&c, &params(), &AngularGrid::with_resolution(0.5).unwrap()).unwrap();
    assert!((coarse.directivity_db - fine.directivity_db).abs() < 0.05);
}

#[test]
fn steering_reciprocity_mirrors_in_phi() {
    let grid = AngularGrid::default();
    let a = compute_pattern_fast(&generate_steering_config(25.0, 40.0, 12, 12, 8, &params()).unwrap(), &params(), &grid);
    let b = compute_pattern_fast(&generate_steering_config(25.0, 220.0, 12, 12, 8, &params()).unwrap(), &params(), &grid);
    let (ta, pa) = max_direction(&a);
    let (tb, pb) = max_direction(&b);
    assert!((ta - tb).abs() <= 1.0);
    let d = ((pb - pa - 180.0) + 180.0).rem_euclid(360.0) - 180.0;
    assert!(d.abs() <= 2.0, "{pa} vs {pb}");
}

fn measures_close(a: &msfnet::PatternMeasures, b: &msfnet::PatternMeasures) -> bool {
    a.to_array().iter().zip(b.to_array()).all(|(x, y)| x == &y || (x - y).abs() <= 1e-9 * x.abs().max(1.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn measures_are_invariant_under_global_shift(seed in any::<u64>(), shift in 1u16..8) {
        let c = random_config(seed, 12, 12, 8);
        let grid = AngularGrid::with_resolution(2.0).unwrap();
        let a = extract_measures(&c, &params(), &grid).unwrap();
        let b = extract_measures(&c.shifted(shift), &params(), &grid).unwrap();
        prop_assert!(measures_close(&a, &b), "{:?} vs {:?}", a, b);
    }

    #[test]
    fn power_is_bounded_by_coherent_sum(seed in any::<u64>(), n in 1usize..8, m in 1usize..8) {
        let c = random_config(seed, n, m, 8);
        let grid = AngularGrid::with_resolution(5.0).unwrap();
        let pattern = compute_pattern_fast(&c, &params(), &grid);
        let bound = ((n * m) as f64).powi(2) * (1.0 + 1e-9);
        prop_assert!(pattern.power().iter().all(|&p| p <= bound && p >= 0.0));
        prop_assert!(pattern.power_db().iter().cloned().fold(f64::NEG_INFINITY, f64::max).abs() < 1e-12);
    }

    #[test]
    fn measures_stay_in_range(seed in any::<u64>()) {
        let c = random_config(seed, 12, 12, 8);
        let m = extract_measures(&c, &params(), &AngularGrid::with_resolution(2.0).unwrap()).unwrap();
        prop_assert!(m.directivity_db.is_finite() && m.directivity_db > 0.0);
        prop_assert!((0.0..=90.0).contains(&m.theta_max_deg));
        prop_assert!((0.0..360.0).contains(&m.phi_max_deg));
    }
}
