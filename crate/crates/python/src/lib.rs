use msfnet::datagen::{generate_steering_config, FilterCriteria};
use msfnet::evaluate::{predict_gated, GatedPrediction};
use msfnet::neural::load_model;
use msfnet::{extract_measures, AngularGrid, Error, MsfConfig, PatternMeasures, PhysicalParams};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn physics(wavelength: f64, cell_pitch: f64, grid_res: f64) -> PyResult<(PhysicalParams, AngularGrid)> {
    let params = PhysicalParams::new(wavelength, cell_pitch, 1.0).map_err(to_py_err)?;
    let grid = AngularGrid::with_resolution(grid_res).map_err(to_py_err)?;
    Ok((params, grid))
}

fn measures_dict<'py>(py: Python<'py>, m: &PatternMeasures) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("directivity_db", m.directivity_db)?;
    d.set_item("pslr_db", m.pslr_db)?;
    d.set_item("theta_max_deg", m.theta_max_deg)?;
    d.set_item("phi_max_deg", m.phi_max_deg)?;
    d.set_item("hpbw_deg", m.hpbw_deg)?;
    Ok(d)
}

/// Far-field power of a state matrix on the `(theta, phi)` grid.
///
/// Returns `(theta_deg, phi_deg, power)` with `power[t][p]`.
#[pyfunction]
#[pyo3(signature = (states, n_states=8, wavelength=1.0, cell_pitch=0.5, grid_res=1.0))]
fn far_field_power(
    states: Vec<Vec<u16>>,
    n_states: u16,
    wavelength: f64,
    cell_pitch: f64,
    grid_res: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let config = MsfConfig::from_rows(&states, n_states).map_err(to_py_err)?;
    let (params, grid) = physics(wavelength, cell_pitch, grid_res)?;
    let pattern = msfnet::compute_pattern_fast(&config, &params, &grid);
    let power = pattern
        .power()
        .chunks(pattern.n_phi())
        .map(<[f64]>::to_vec)
        .collect();
    Ok((grid.theta().to_vec(), grid.phi().to_vec(), power))
}

/// Directivity, PSLR, beam direction and HPBW of a state matrix.
#[pyfunction]
#[pyo3(signature = (states, n_states=8, wavelength=1.0, cell_pitch=0.5, grid_res=1.0))]
fn measures<'py>(
    py: Python<'py>,
    states: Vec<Vec<u16>>,
    n_states: u16,
    wavelength: f64,
    cell_pitch: f64,
    grid_res: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = MsfConfig::from_rows(&states, n_states).map_err(to_py_err)?;
    let (params, grid) = physics(wavelength, cell_pitch, grid_res)?;
    let m = extract_measures(&config, &params, &grid).map_err(to_py_err)?;
    measures_dict(py, &m)
}

/// Quantized phase-gradient state matrix steering the beam to `(theta, phi)`.
#[pyfunction]
#[pyo3(signature = (theta_deg, phi_deg, n_rows=12, n_cols=12, n_states=8, wavelength=1.0, cell_pitch=0.5))]
fn steering_config(
    theta_deg: f64,
    phi_deg: f64,
    n_rows: usize,
    n_cols: usize,
    n_states: u16,
    wavelength: f64,
    cell_pitch: f64,
) -> PyResult<Vec<Vec<u16>>> {
    let params = PhysicalParams::new(wavelength, cell_pitch, 1.0).map_err(to_py_err)?;
    let config = generate_steering_config(theta_deg, phi_deg, n_rows, n_cols, n_states, &params).map_err(to_py_err)?;
    Ok(config.rows())
}

/// Surrogate prediction for one state matrix using a saved model file.
///
/// With `gate=True` the configuration is first checked analytically and
/// rejected when it falls below the interpretability criteria. Returns a
/// dict with `status` (`"predicted"` or `"rejected"`), `prediction`,
/// `analytical` and, when rejected, `reason`.
#[pyfunction]
#[pyo3(signature = (model_path, states, n_states=8, gate=true, min_directivity_db=15.0, min_pslr_db=3.0))]
fn predict<'py>(
    py: Python<'py>,
    model_path: &str,
    states: Vec<Vec<u16>>,
    n_states: u16,
    gate: bool,
    min_directivity_db: f64,
    min_pslr_db: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = MsfConfig::from_rows(&states, n_states).map_err(to_py_err)?;
    let file = load_model(model_path).map_err(to_py_err)?;
    let criteria = FilterCriteria {
        min_directivity_db,
        min_pslr_db,
    };
    let outcome = py
        .detach(|| predict_gated(&config, &file, gate.then_some(&criteria)))
        .map_err(to_py_err)?;
    let d = PyDict::new(py);
    match outcome {
        GatedPrediction::Predicted { prediction, analytical } => {
            d.set_item("status", "predicted")?;
            d.set_item("prediction", measures_dict(py, &prediction)?)?;
            d.set_item("analytical", analytical.map(|m| measures_dict(py, &m)).transpose()?)?;
        }
        GatedPrediction::Rejected { analytical, reason } => {
            d.set_item("status", "rejected")?;
            d.set_item("prediction", py.None())?;
            d.set_item("analytical", measures_dict(py, &analytical)?)?;
            d.set_item("reason", reason)?;
        }
    }
    Ok(d)
}

#[pymodule]
fn _native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(far_field_power, m)?)?;
    m.add_function(wrap_pyfunction!(measures, m)?)?;
    m.add_function(wrap_pyfunction!(steering_config, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    Ok(())
}
