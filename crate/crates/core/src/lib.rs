//! Coding-metasurface far-field synthesis, beam measures and neural
//! surrogates that predict those measures from the unit-cell state matrix.

pub mod cli;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod evaluate;
pub mod farfield;
pub mod measures;
pub mod neural;
pub mod rng;

pub use datagen::{generate_dataset, Dataset, FilterCriteria, FilterMode, GenerateOptions, Normalization, Split};
pub use domain::{load_config, save_config, AngularGrid, MsfConfig, PhysicalParams, UnitCellState};
pub use error::{Error, Result};
pub use farfield::{compute_pattern, compute_pattern_fast, FarFieldPlan, RadiationPattern};
pub use measures::{extract_measures, PatternMeasures};
pub use rng::SeededRng;
