//! Training-corpus generation.
//!
//! Each sample starts from a clean beam-steering configuration towards a
//! random target `(theta_t, phi_t)`, then a random fraction of its cells is
//! redrawn ("entropy ratio"), so the corpus spans everything from meaningful
//! steering profiles to pure noise. Ground-truth measures come from the
//! analytical engine. Split membership and all random draws depend only on
//! `(seed, seed_index)`, so growing a corpus never reshuffles existing
//! samples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::f64::consts::PI;

use crate::domain::{AngularGrid, MsfConfig, PhysicalParams};
use crate::error::{Error, Result};
use crate::farfield::{phase_of_state, FarFieldPlan};
use crate::measures::{extract_measures_with_plan, PatternMeasures};
use crate::rng::{splitmix64, SeededRng, RNG_ALGORITHM};

pub const DATASET_FORMAT: &str = "msfnet-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = concat!("msfnet ", env!("CARGO_PKG_VERSION"));

/// Default cap on the steering elevation, degrees.
pub const DEFAULT_MAX_STEER_THETA: f64 = 60.0;

/// Split slots per block of 100 consecutive seed indices.
const SPLIT_BLOCK: u64 = 100;
const TRAIN_SLOTS: u64 = 68;
const VALIDATION_SLOTS: u64 = 17;
const SPLIT_SALT: u64 = 0x5B11_7A55_16E0_0001;
const MAX_REJECT_ATTEMPTS: usize = 10_000;

/// Quantized phase-gradient configuration steering the main beam towards
/// `(theta_t, phi_t)` (degrees).
pub fn generate_steering_config(
    theta_t: f64,
    phi_t: f64,
    n_rows: usize,
    n_cols: usize,
    n_states: u16,
    params: &PhysicalParams,
) -> Result<MsfConfig> {
    if !(0.0..=90.0).contains(&theta_t) {
        return Err(Error::Validation(format!(
            "steering elevation {theta_t} outside [0, 90]"
        )));
    }
    let k0d = params.wave_number() * params.cell_pitch();
    let (st, (sp, cp)) = (theta_t.to_radians().sin(), phi_t.to_radians().sin_cos());
    let q = f64::from(n_states);
    let mut states = Vec::with_capacity(n_rows * n_cols);
    for j in 1..=n_rows {
        for i in 1..=n_cols {
            let phase = -k0d * st * ((i as f64 - 0.5) * cp + (j as f64 - 0.5) * sp);
            let code = (phase * q / (2.0 * PI)).round() as i64;
            states.push(code.rem_euclid(i64::from(n_states)) as u16);
        }
    }
    MsfConfig::new(n_rows, n_cols, n_states, states)
}

/// Number of cells redrawn for a ratio: `ceil(ratio * n_cells)`.
pub fn entropy_cell_count(ratio: f64, n_cells: usize) -> usize {
    let x = ratio * n_cells as f64;
    // Guard against products like 0.29 * 100 = 28.999999999999996.
    ((x - 1e-9).ceil().max(0.0) as usize).min(n_cells)
}

/// Redraws `ceil(ratio * N * M)` distinct cells with uniform random states.
pub fn inject_entropy(config: &MsfConfig, ratio: f64, rng: &mut SeededRng) -> Result<MsfConfig> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Validation(format!("entropy ratio {ratio} outside [0, 1]")));
    }
    let mut out = config.clone();
    let count = entropy_cell_count(ratio, config.n_cells());
    let positions = rng.sample_indices(config.n_cells(), count);
    let q = u64::from(config.n_states());
    let states = out.states_mut();
    for pos in positions {
        states[pos] = rng.below(q) as u16;
    }
    Ok(out)
}

/// Thresholds deciding whether a configuration is interpretable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterCriteria {
    #[serde(serialize_with = "ser_signed_inf", deserialize_with = "de_signed_inf")]
    pub min_directivity_db: f64,
    #[serde(serialize_with = "ser_signed_inf", deserialize_with = "de_signed_inf")]
    pub min_pslr_db: f64,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        Self {
            min_directivity_db: 15.0,
            min_pslr_db: 3.0,
        }
    }
}

impl FilterCriteria {
    /// Criteria every configuration passes.
    pub fn vacuous() -> Self {
        Self {
            min_directivity_db: f64::NEG_INFINITY,
            min_pslr_db: f64::NEG_INFINITY,
        }
    }
}

fn ser_signed_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn de_signed_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
    }
}

pub fn interpretability_filter(measures: &PatternMeasures, criteria: &FilterCriteria) -> bool {
    measures.directivity_db >= criteria.min_directivity_db
        && measures.pslr_db >= criteria.min_pslr_db
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep every sample and record the filter outcome.
    TagOnly,
    /// Redraw until the sample passes.
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Split of a sample, a function of `(seed, seed_index)` only.
///
/// Every aligned block of 100 indices holds exactly 68 train, 17 validation
/// and 15 test slots, arranged by a seeded permutation of the block.
pub fn split_of(seed: u64, seed_index: u64) -> Split {
    let block = seed_index / SPLIT_BLOCK;
    let mut rng = SeededRng::child(splitmix64(seed ^ SPLIT_SALT), block);
    let mut slots: Vec<u64> = (0..SPLIT_BLOCK).collect();
    rng.shuffle(&mut slots);
    let slot = slots[(seed_index % SPLIT_BLOCK) as usize];
    if slot < TRAIN_SLOTS {
        Split::Train
    } else if slot < TRAIN_SLOTS + VALIDATION_SLOTS {
        Split::Validation
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Steering target `(theta_t, phi_t)` in degrees.
    pub base_target: (f64, f64),
    pub entropy_ratio: f64,
    pub seed_index: u64,
    pub interpretable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub config: MsfConfig,
    pub measures: PatternMeasures,
    pub meta: SampleMeta,
    pub split: Split,
}

impl SampleRecord {
    /// One newline-terminated JSON line: flat config, measures, meta, split.
    pub fn to_json_line(&self) -> Result<String> {
        let line = RecordLine {
            config: self.config.states().to_vec(),
            measures: self.measures,
            meta: self.meta.clone(),
            split: self.split,
        };
        let mut s = serde_json::to_string(&line).map_err(|e| Error::Parse(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_line(line: &str, n_rows: usize, n_cols: usize, n_states: u16) -> Result<Self> {
        let rec: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
        let config = MsfConfig::new(n_rows, n_cols, n_states, rec.config)?;
        Ok(SampleRecord {
            config,
            measures: rec.measures,
            meta: rec.meta,
            split: rec.split,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    config: Vec<u16>,
    measures: PatternMeasures,
    meta: SampleMeta,
    split: Split,
}

/// Target standardization and input scaling statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub target_mean: [f64; 5],
    pub target_scale: [f64; 5],
    pub input_scale: f64,
}

impl Normalization {
    /// Statistics from a set of target vectors (population standard deviation).
    pub fn from_targets<'a>(targets: impl Iterator<Item = &'a [f64; 5]>, n_states: u16) -> Self {
        let rows: Vec<&[f64; 5]> = targets.filter(|t| t.iter().all(|v| v.is_finite())).collect();
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; 5];
        for r in &rows {
            for k in 0..5 {
                mean[k] += r[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 5];
        for r in &rows {
            for k in 0..5 {
                var[k] += (r[k] - mean[k]).powi(2);
            }
        }
        let scale = var.map(|v| (v / n).sqrt());
        Self {
            target_mean: mean,
            target_scale: scale,
            input_scale: input_scale_for(n_states),
        }
    }

    fn check_scale(&self) -> Result<()> {
        if let Some(k) = self.target_scale.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Validation(format!(
                "target '{}' is constant over the training split (scale {}); cannot standardize",
                crate::measures::MEASURE_NAMES[k],
                self.target_scale[k]
            )));
        }
        Ok(())
    }

    pub fn standardize(&self, y: &[f64; 5]) -> Result<[f64; 5]> {
        self.check_scale()?;
        Ok(std::array::from_fn(|k| {
            (y[k] - self.target_mean[k]) / self.target_scale[k]
        }))
    }

    pub fn destandardize(&self, z: &[f64]) -> [f64; 5] {
        std::array::from_fn(|k| z[k] * self.target_scale[k] + self.target_mean[k])
    }

    /// Max-min scaled pixel values `state / (Q - 1)` in `[0, 1]`.
    pub fn normalize_inputs(&self, config: &MsfConfig) -> Vec<f64> {
        config
            .states()
            .iter()
            .map(|&s| f64::from(s) * self.input_scale)
            .collect()
    }
}

pub fn input_scale_for(n_states: u16) -> f64 {
    if n_states > 1 {
        1.0 / f64::from(n_states - 1)
    } else {
        1.0
    }
}

/// `state / (Q - 1)`.
pub fn normalize_inputs(config: &MsfConfig) -> Vec<f64> {
    let s = input_scale_for(config.n_states());
    config.states().iter().map(|&v| f64::from(v) * s).collect()
}

/// Standardized targets of every record, in record order.
pub fn standardize_targets(dataset: &Dataset) -> Result<Vec<[f64; 5]>> {
    dataset
        .records
        .iter()
        .map(|r| dataset.normalization.standardize(&r.measures.to_array()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub rng: String,
    pub generator_version: String,
    pub max_steer_theta_deg: f64,
    pub filter_mode: FilterMode,
    pub criteria: FilterCriteria,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_states: u16,
    pub records: Vec<SampleRecord>,
    pub params: PhysicalParams,
    pub grid: AngularGrid,
    pub normalization: Normalization,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    version: u32,
    n_rows: usize,
    n_cols: usize,
    n_states: u16,
    params: PhysicalParams,
    grid: AngularGrid,
    normalization: Normalization,
    provenance: Provenance,
}

/// Knobs of [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_states: u16,
    pub params: PhysicalParams,
    pub grid: AngularGrid,
    pub criteria: FilterCriteria,
    pub filter_mode: FilterMode,
    pub max_steer_theta_deg: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n_rows: crate::domain::DEFAULT_ROWS,
            n_cols: crate::domain::DEFAULT_COLS,
            n_states: crate::domain::DEFAULT_STATES,
            params: PhysicalParams::default(),
            grid: AngularGrid::default(),
            criteria: FilterCriteria::default(),
            filter_mode: FilterMode::TagOnly,
            max_steer_theta_deg: DEFAULT_MAX_STEER_THETA,
        }
    }
}

/// One sample from its own child stream.
pub fn generate_sample(
    seed: u64,
    seed_index: u64,
    plan: &FarFieldPlan,
    opts: &GenerateOptions,
) -> Result<SampleRecord> {
    let mut rng = SeededRng::child(seed, seed_index);
    for _ in 0..MAX_REJECT_ATTEMPTS {
        let theta_t = rng.uniform_range(0.0, opts.max_steer_theta_deg);
        let phi_t = rng.uniform_range(0.0, 360.0);
        let ratio = rng.uniform();
        let base = generate_steering_config(
            theta_t,
            phi_t,
            opts.n_rows,
            opts.n_cols,
            opts.n_states,
            &opts.params,
        )?;
        let config = inject_entropy(&base, ratio, &mut rng)?;
        let measures = extract_measures_with_plan(plan, &config)?.measures;
        let interpretable = interpretability_filter(&measures, &opts.criteria);
        if interpretable || opts.filter_mode == FilterMode::TagOnly {
            return Ok(SampleRecord {
                config,
                measures,
                meta: SampleMeta {
                    base_target: (theta_t, phi_t),
                    entropy_ratio: ratio,
                    seed_index,
                    interpretable,
                },
                split: split_of(seed, seed_index),
            });
        }
    }
    Err(Error::Numeric(format!(
        "sample {seed_index}: no interpretable configuration after {MAX_REJECT_ATTEMPTS} draws"
    )))
}

/// Generates samples `start..end` in parallel; output ordered by index.
pub fn generate_records(
    seed: u64,
    range: std::ops::Range<u64>,
    opts: &GenerateOptions,
    progress: Option<&(dyn Fn(u64) + Sync)>,
) -> Result<Vec<SampleRecord>> {
    let plan = FarFieldPlan::new(&opts.params, &opts.grid, opts.n_rows, opts.n_cols);
    range
        .into_par_iter()
        .map(|k| {
            let r = generate_sample(seed, k, &plan, opts);
            if let Some(cb) = progress {
                cb(k);
            }
            r
        })
        .collect()
}

pub fn generate_dataset(count: usize, seed: u64, opts: &GenerateOptions) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Validation("sample count must be positive".into()));
    }
    let records = generate_records(seed, 0..count as u64, opts, None)?;
    Ok(Dataset::from_records(records, seed, opts))
}

impl Dataset {
    pub fn from_records(records: Vec<SampleRecord>, seed: u64, opts: &GenerateOptions) -> Self {
        let train_targets: Vec<[f64; 5]> = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.measures.to_array())
            .collect();
        let normalization = Normalization::from_targets(train_targets.iter(), opts.n_states);
        let count = |s| records.iter().filter(|r| r.split == s).count();
        let counts = SplitCounts {
            train: count(Split::Train),
            validation: count(Split::Validation),
            test: count(Split::Test),
        };
        Self {
            n_rows: opts.n_rows,
            n_cols: opts.n_cols,
            n_states: opts.n_states,
            params: opts.params,
            grid: opts.grid.clone(),
            normalization,
            provenance: Provenance {
                seed,
                rng: RNG_ALGORITHM.to_string(),
                generator_version: GENERATOR_VERSION.to_string(),
                max_steer_theta_deg: opts.max_steer_theta_deg,
                filter_mode: opts.filter_mode,
                criteria: opts.criteria,
                counts,
            },
            records,
        }
    }

    /// Options that regenerate this dataset.
    pub fn options(&self) -> GenerateOptions {
        GenerateOptions {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            n_states: self.n_states,
            params: self.params,
            grid: self.grid.clone(),
            criteria: self.provenance.criteria,
            filter_mode: self.provenance.filter_mode,
            max_steer_theta_deg: self.provenance.max_steer_theta_deg,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Normalized inputs and standardized targets of the records of `split`
    /// with finite targets, as `(X, Y)` matrices.
    pub fn design_matrices(&self, split: Split) -> Result<(Array2<f64>, Array2<f64>)> {
        let recs: Vec<&SampleRecord> = self
            .split(split)
            .filter(|r| r.measures.is_finite())
            .collect();
        design_from_records(&recs, &self.normalization)
    }

    /// Re-derives every record's measures; returns the indices that differ by
    /// more than `tol`.
    pub fn audit(&self, tol: f64) -> Result<Vec<usize>> {
        let plan = FarFieldPlan::new(&self.params, &self.grid, self.n_rows, self.n_cols);
        let bad: Result<Vec<Option<usize>>> = self
            .records
            .par_iter()
            .enumerate()
            .map(|(k, r)| {
                let m = extract_measures_with_plan(&plan, &r.config)?.measures;
                let same = m
                    .to_array()
                    .iter()
                    .zip(r.measures.to_array())
                    .all(|(a, b)| a == &b || (a - b).abs() <= tol);
                Ok((!same).then_some(k))
            })
            .collect();
        Ok(bad?.into_iter().flatten().collect())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = HeaderLine {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            n_states: self.n_states,
            params: self.params,
            grid: self.grid.clone(),
            normalization: self.normalization.clone(),
            provenance: self.provenance.clone(),
        };
        let to_parse = |e: serde_json::Error| Error::Parse(e.to_string());
        let io = |e: std::io::Error| Error::io("<dataset stream>", e);
        serde_json::to_writer(&mut out, &header).map_err(to_parse)?;
        out.write_all(b"\n").map_err(io)?;
        for r in &self.records {
            out.write_all(r.to_json_line()?.as_bytes()).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(BufWriter::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let io = |e: std::io::Error| Error::io("<dataset stream>", e);
        let header_text = lines
            .next()
            .ok_or_else(|| Error::Parse("dataset file is empty".into()))?
            .map_err(io)?;
        let header: HeaderLine = serde_json::from_str(&header_text)
            .map_err(|e| Error::Parse(format!("dataset header: {e}")))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Parse(format!(
                "unsupported dataset format {} v{}",
                header.format, header.version
            )));
        }
        let mut records = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = SampleRecord::from_json_line(&line, header.n_rows, header.n_cols, header.n_states)
                .map_err(|e| match e {
                    Error::Parse(m) => Error::Parse(format!("dataset line {}: {m}", k + 2)),
                    other => other,
                })?;
            records.push(rec);
        }
        Ok(Self {
            n_rows: header.n_rows,
            n_cols: header.n_cols,
            n_states: header.n_states,
            records,
            params: header.params,
            grid: header.grid,
            normalization: header.normalization,
            provenance: header.provenance,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file))
    }
}

pub fn design_from_records(
    records: &[&SampleRecord],
    norm: &Normalization,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n_in = records.first().map_or(0, |r| r.config.n_cells());
    let mut x = Array2::zeros((records.len(), n_in));
    let mut y = Array2::zeros((records.len(), 5));
    for (k, r) in records.iter().enumerate() {
        for (c, v) in norm.normalize_inputs(&r.config).into_iter().enumerate() {
            x[[k, c]] = v;
        }
        let z = norm.standardize(&r.measures.to_array())?;
        for c in 0..5 {
            y[[k, c]] = z[c];
        }
    }
    Ok((x, y))
}

/// Feature/target tables read from a tabulated-pattern CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedData {
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub features: Array2<f64>,
    pub targets: Array2<f64>,
    /// Row indices of the 85% training part.
    pub train: Vec<usize>,
    /// Row indices of the 15% held-out part.
    pub test: Vec<usize>,
}

impl TabulatedData {
    pub fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (
            self.features.select(ndarray::Axis(0), idx),
            self.targets.select(ndarray::Axis(0), idx),
        )
    }
}

/// Reads a `f1,...,fk,p1,...,pm` CSV and splits it 85/15 with a seeded shuffle.
pub fn ingest_tabulated_patterns(path: impl AsRef<Path>, seed: u64) -> Result<TabulatedData> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tabulated_patterns(file, seed)
}

pub fn read_tabulated_patterns<R: std::io::Read>(input: R, seed: u64) -> Result<TabulatedData> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("tabulated patterns: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Parse("tabulated patterns: missing header".into()));
    }
    let n_feat = headers.iter().take_while(|h| h.starts_with('f')).count();
    let n_targ = headers.len() - n_feat;
    if n_feat == 0 || n_targ == 0 || !headers[n_feat..].iter().all(|h| h.starts_with('p')) {
        return Err(Error::Parse(format!(
            "tabulated patterns: header must be f1..fk followed by p1..pm, got {headers:?}"
        )));
    }
    let mut feats = Vec::new();
    let mut targs = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("tabulated patterns row {}: {e}", k + 2)))?;
        if rec.len() != headers.len() {
            return Err(Error::Parse(format!(
                "tabulated patterns row {}: {} fields, expected {}",
                k + 2,
                rec.len(),
                headers.len()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "tabulated patterns row {}, column {}: non-numeric value {field:?}",
                    k + 2,
                    headers[c]
                ))
            })?;
            if c < n_feat {
                feats.push(v);
            } else {
                targs.push(v);
            }
        }
    }
    let n = feats.len() / n_feat;
    if n == 0 {
        return Err(Error::Parse("tabulated patterns: no data rows".into()));
    }
    let features = Array2::from_shape_vec((n, n_feat), feats).expect("row-major shape");
    let targets = Array2::from_shape_vec((n, n_targ), targs).expect("row-major shape");
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let n_train = (n as f64 * 0.85).round() as usize;
    let test = order.split_off(n_train);
    Ok(TabulatedData {
        feature_names: headers[..n_feat].to_vec(),
        target_names: headers[n_feat..].to_vec(),
        features,
        targets,
        train: order,
        test,
    })
}

/// Writes feature/target rows in the tabulated-pattern CSV layout.
pub fn write_tabulated_patterns<W: Write>(
    out: W,
    features: &Array2<f64>,
    targets: &Array2<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = (1..=features.ncols())
        .map(|k| format!("f{k}"))
        .chain((1..=targets.ncols()).map(|k| format!("p{k}")))
        .collect();
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(&header).map_err(err)?;
    for (f, t) in features.outer_iter().zip(targets.outer_iter()) {
        let row: Vec<String> = f.iter().chain(t.iter()).map(|v| format!("{v}")).collect();
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<csv stream>", e))
}

/// Synthetic stand-in for solver-tabulated single-cell data: the reflected
/// power of a fixed surface under oblique plane-wave incidence.
///
/// Features are the incidence angles `(theta_inc, phi_inc)` in radians on an
/// `n_theta_inc x n_phi_inc` grid (`theta_inc` in `[0, 90)`, `phi_inc` in
/// `[0, 360)`); targets are the peak-normalized power on the `phi = 0`
/// elevation cut at `n_cut` equally spaced angles in `[0, 90)` degrees.
pub fn incidence_pattern_table(
    config: &MsfConfig,
    params: &PhysicalParams,
    n_theta_inc: usize,
    n_phi_inc: usize,
    n_cut: usize,
) -> (Array2<f64>, Array2<f64>) {
    let k0d = params.wave_number() * params.cell_pitch();
    let (n, m) = (config.n_rows(), config.n_cols());
    let q = config.n_states();
    let base: Vec<f64> = config
        .states()
        .iter()
        .map(|&s| phase_of_state(crate::domain::UnitCellState::new(s, q).unwrap(), q))
        .collect();
    let norm = (n * m) as f64 * params.reflection_amplitude();
    let rows = n_theta_inc * n_phi_inc;
    let mut features = Array2::zeros((rows, 2));
    let mut targets = Array2::zeros((rows, n_cut));
    let mut r = 0;
    for a in 0..n_theta_inc {
        let ti = (a as f64 * 90.0 / n_theta_inc as f64).to_radians();
        for b in 0..n_phi_inc {
            let pi_ = (b as f64 * 360.0 / n_phi_inc as f64).to_radians();
            features[[r, 0]] = ti;
            features[[r, 1]] = pi_;
            let (ui, vi) = (k0d * ti.sin() * pi_.cos(), k0d * ti.sin() * pi_.sin());
            for c in 0..n_cut {
                let t = (c as f64 * 90.0 / n_cut as f64).to_radians();
                let u = k0d * t.sin();
                let mut e = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    for i in 0..m {
                        let (x, y) = (i as f64 + 0.5, j as f64 + 0.5);
                        e += Complex64::from_polar(1.0, base[j * m + i] + (u + ui) * x + vi * y);
                    }
                }
                targets[[r, c]] = (e * params.reflection_amplitude() / norm).norm_sqr();
            }
            r += 1;
        }
    }
    (features, targets)
}
