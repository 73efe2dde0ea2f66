//! Command-line front end: `simulate`, `generate`, `train`, `evaluate` and
//! `predict` over one shared set of file formats and seeds.
//!
//! Every run writes `<command>.run.json` (resolved arguments, seed, thread
//! count, toolkit version) next to its outputs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::datagen::{
    generate_records, read_tabulated_patterns, Dataset, FilterCriteria, FilterMode, GenerateOptions, SampleRecord,
    Split, TabulatedData, DEFAULT_MAX_STEER_THETA,
};
use crate::domain::{load_config, AngularGrid, PhysicalParams};
use crate::error::{Error, Result};
use crate::evaluate::{
    accuracy_curves, cross_validate_lambda, emit_curves, format_reports, measure_errors, predict_gated,
    predictions_for_split, r_squared, report_from_errors, AccuracyReport, ToleranceSpec,
};
use crate::farfield::FarFieldPlan;
use crate::measures::measure_pattern;
use crate::neural::{
    load_model, save_model, train_rbf, train_scg, train_sgd, Activation, Cnn, CnnArch, L2Mode, Mlp, ModelContext,
    ModelFile, NeuralModel, RbfConfig, SurrogateModel, TrainConfig, TrainMeta, TrainOutcome,
};
use crate::rng::SeededRng;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MSFNET_OUT_DIR";

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "msfnet",
    version,
    about = "Coding-metasurface far fields, beam measures and neural surrogates",
    after_help = "Defaults tagged [published] follow the reference surrogate study; \
                  [toolkit default] values are choices of this implementation."
)]
pub struct Cli {
    /// Worker threads (default: all cores). `--threads 1` is the bit-reproducible reference path.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Compute the far-field pattern and beam measures of one configuration.
    Simulate(SimulateArgs),
    /// Generate a labelled training corpus (JSON lines).
    Generate(GenerateArgs),
    /// Train a surrogate (MLP, CNN or RBF) on a corpus or a tabulated-pattern CSV.
    Train(TrainArgs),
    /// Tolerance-accuracy report of trained surrogates on a corpus split.
    Evaluate(EvaluateArgs),
    /// Gated prediction for one configuration.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PhysicsArgs {
    /// Free-space wavelength [toolkit default: 1].
    #[arg(long, default_value_t = 1.0)]
    pub wavelength: f64,
    /// Unit-cell pitch in the same length unit [toolkit default: 0.5, half a wavelength].
    #[arg(long, default_value_t = 0.5)]
    pub cell_pitch: f64,
    /// Unit-cell reflection amplitude [toolkit default: 1].
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    /// Angular grid step in degrees for both theta and phi [toolkit default: 1].
    #[arg(long, default_value_t = 1.0)]
    pub grid_res: f64,
}

impl PhysicsArgs {
    fn resolve(&self) -> Result<(PhysicalParams, AngularGrid)> {
        Ok((
            PhysicalParams::new(self.wavelength, self.cell_pitch, self.amplitude)?,
            AngularGrid::with_resolution(self.grid_res)?,
        ))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CriteriaArgs {
    /// Minimum directivity (dB) of an interpretable configuration [toolkit default: 15].
    #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
    pub min_directivity: f64,
    /// Minimum PSLR (dB) of an interpretable configuration [toolkit default: 3].
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub min_pslr: f64,
}

impl CriteriaArgs {
    fn resolve(&self) -> FilterCriteria {
        FilterCriteria {
            min_directivity_db: self.min_directivity,
            min_pslr_db: self.min_pslr,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Configuration JSON file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory [default: $MSFNET_OUT_DIR or the current directory].
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out: PathBuf,
    /// Also write the full pattern as CSV.
    #[arg(long)]
    pub export_pattern: bool,
    #[command(flatten)]
    pub physics: PhysicsArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FilterModeArg {
    /// Keep every sample, record whether it is interpretable.
    Tag,
    /// Redraw samples until they are interpretable.
    Reject,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Number of samples [published corpus size: 100000].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    /// Master seed [toolkit default: 42].
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output dataset file [default: $MSFNET_OUT_DIR/dataset.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// What to do with configurations that fail the criteria [toolkit default: tag].
    #[arg(long, value_enum, default_value_t = FilterModeArg::Tag)]
    pub filter_mode: FilterModeArg,
    #[command(flatten)]
    pub criteria: CriteriaArgs,
    /// Maximum steering elevation in degrees [toolkit default: 60].
    #[arg(long, default_value_t = DEFAULT_MAX_STEER_THETA)]
    pub max_steer_theta: f64,
    /// Unit-cell rows [published: 12].
    #[arg(long, default_value_t = crate::domain::DEFAULT_ROWS)]
    pub rows: usize,
    /// Unit-cell columns [published: 12].
    #[arg(long, default_value_t = crate::domain::DEFAULT_COLS)]
    pub cols: usize,
    /// Phase states per cell [toolkit default: 8].
    #[arg(long, default_value_t = crate::domain::DEFAULT_STATES)]
    pub states: u16,
    /// Samples per checkpoint of the resumable partial file [toolkit default: 1000].
    #[arg(long, default_value_t = 1000)]
    pub chunk: u64,
    #[command(flatten)]
    pub physics: PhysicsArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
    Rbf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum L2ModeArg {
    /// lambda * sum(w^2) / n_weights
    Mean,
    /// lambda * sum(w^2)
    Sum,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Corpus (JSON lines) or tabulated-pattern CSV (`f1..fk,p1..pm` header).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Output model file [default: $MSFNET_OUT_DIR/<model>.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training history CSV [default: <out>.history.csv].
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Seed for initialization, shuffling, dropout and CV folds [toolkit default: 42].
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// L2 strength [published: 0.8].
    #[arg(long, default_value_t = 0.8, conflicts_with = "cv_lambda")]
    pub lambda: f64,
    /// Select lambda by 10-fold cross-validation over these candidates
    /// [candidate set is a toolkit choice, e.g. 0.1,0.4,0.8,1.6].
    #[arg(long, value_delimiter = ',')]
    pub cv_lambda: Option<Vec<f64>>,
    /// Training records used for cross-validation [toolkit default: 10000].
    #[arg(long, default_value_t = 10_000)]
    pub cv_subsample: usize,
    /// SCG iterations per cross-validation fit [toolkit default: 40].
    #[arg(long, default_value_t = 40)]
    pub cv_iterations: usize,
    /// How the L2 sum is scaled [toolkit default: mean].
    #[arg(long, value_enum, default_value_t = L2ModeArg::Mean)]
    pub l2_mode: L2ModeArg,
    /// SCG iteration cap (MLP) [toolkit default: 1000].
    #[arg(long, default_value_t = 1000)]
    pub max_iterations: usize,
    /// SGD epoch cap (CNN) [toolkit default: 500].
    #[arg(long, default_value_t = 500)]
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping [toolkit default: 20].
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    /// SGD learning rate [published: 0.001].
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f64,
    /// SGD momentum [published: 0.9].
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// SGD learning-rate decay [published: 1e-4].
    #[arg(long, default_value_t = 1e-4)]
    pub decay: f64,
    /// SGD mini-batch size [toolkit default: 32].
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// RBF spread [published: 1].
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// RBF training-MSE goal [published: 1e-11].
    #[arg(long, default_value_t = 1e-11)]
    pub mse_goal: f64,
    /// RBF center budget [toolkit default: 400].
    #[arg(long, default_value_t = 400)]
    pub max_centers: usize,
    /// Use only the first N training records of the corpus.
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Train one single-output network per measure instead of a joint model.
    #[arg(long)]
    pub per_measure: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Model file; repeat to compare several models side by side.
    #[arg(long, required_unless_present = "self_test")]
    pub model: Vec<PathBuf>,
    /// Output directory [default: $MSFNET_OUT_DIR or the current directory].
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out: PathBuf,
    /// Also write accuracy-vs-tolerance curves (curves.csv).
    #[arg(long)]
    pub curves: bool,
    /// Score a perfect predictor (ground truth against itself).
    #[arg(long)]
    pub self_test: bool,
    /// Split to score [toolkit default: test].
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Score only samples that pass the interpretability criteria recorded
    /// in the corpus, as the runtime gate would.
    #[arg(long)]
    pub gated: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Skip the analytical interpretability check.
    #[arg(long)]
    pub no_gate: bool,
    /// Override the model's minimum directivity criterion (dB).
    #[arg(long, allow_negative_numbers = true)]
    pub min_directivity: Option<f64>,
    /// Override the model's minimum PSLR criterion (dB).
    #[arg(long, allow_negative_numbers = true)]
    pub min_pslr: Option<f64>,
    /// Directory for prediction.json and the run log [default: $MSFNET_OUT_DIR, else none].
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct RunLog<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    threads: usize,
    seed: Option<u64>,
    args: &'a T,
}

fn log_run<T: Serialize>(dir: &Path, command: &str, seed: Option<u64>, args: &T) -> Result<()> {
    ensure_dir(dir)?;
    let log = RunLog {
        command,
        version: env!("CARGO_PKG_VERSION"),
        threads: rayon::current_num_threads(),
        seed,
        args,
    };
    write_text(&dir.join(format!("{command}.run.json")), &to_json_pretty(&log)?)
}

/// Parses the command line, runs it and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not configure the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
    }
}

#[derive(Serialize)]
struct SimulateOutput {
    measures: crate::measures::PatternMeasures,
    n_lobes: usize,
    degenerate: bool,
    hpbw_clamped: bool,
    params: PhysicalParams,
    grid: AngularGrid,
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let (params, grid) = a.physics.resolve()?;
    log_run(&a.out, "simulate", None, a)?;
    let plan = FarFieldPlan::new(&params, &grid, config.n_rows(), config.n_cols());
    let pattern = plan.compute(&config);
    let report = measure_pattern(&pattern)?;
    let out = SimulateOutput {
        measures: report.measures,
        n_lobes: report.n_lobes,
        degenerate: report.degenerate,
        hpbw_clamped: report.hpbw_clamped,
        params,
        grid,
    };
    write_text(&a.out.join("measures.json"), &to_json_pretty(&out)?)?;
    if a.export_pattern {
        let path = a.out.join("pattern.csv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        pattern.write_csv(&mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let m = report.measures;
    println!("directivity_db  {:.4}", m.directivity_db);
    println!("pslr_db         {}", if m.pslr_db.is_finite() { format!("{:.4}", m.pslr_db) } else { "inf".into() });
    println!("theta_max_deg   {:.4}", m.theta_max_deg);
    println!("phi_max_deg     {:.4}", m.phi_max_deg);
    println!("hpbw_deg        {:.4}", m.hpbw_deg);
    if report.degenerate {
        println!("note: pattern is flat (single degenerate lobe)");
    }
    if report.hpbw_clamped {
        println!("note: half-power crossing not found on the cut; beam width clamped");
    }
    Ok(())
}

/// Identity of a generation run; a partial file is only resumed when it
/// matches exactly.
#[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
struct GenerationKey {
    seed: u64,
    n_rows: usize,
    n_cols: usize,
    n_states: u16,
    params: PhysicalParams,
    grid: AngularGrid,
    criteria: FilterCriteria,
    filter_mode: FilterMode,
    max_steer_theta_deg: f64,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Reads the complete lines of a partial file; a torn last line is dropped
/// and the file truncated to the last complete record.
fn read_partial(path: &Path, opts: &GenerateOptions) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut good_bytes = 0u64;
    for line in BufReader::new(file).split(b'\n') {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8_lossy(&line);
        match SampleRecord::from_json_line(&text, opts.n_rows, opts.n_cols, opts.n_states) {
            Ok(r) if r.meta.seed_index == records.len() as u64 => {
                good_bytes += line.len() as u64 + 1;
                records.push(r);
            }
            _ => break,
        }
    }
    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(good_bytes).map_err(|e| Error::io(path, e))?;
    Ok(records)
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| default_out_dir().join("dataset.jsonl"));
    let dir = parent_dir(&out);
    let (params, grid) = a.physics.resolve()?;
    if a.chunk == 0 {
        return Err(Error::Validation("--chunk must be positive".into()));
    }
    if !(a.max_steer_theta >= 0.0 && a.max_steer_theta <= 90.0) {
        return Err(Error::Validation(format!(
            "--max-steer-theta must lie in [0, 90], got {}",
            a.max_steer_theta
        )));
    }
    let opts = GenerateOptions {
        n_rows: a.rows,
        n_cols: a.cols,
        n_states: a.states,
        params,
        grid,
        criteria: a.criteria.resolve(),
        filter_mode: match a.filter_mode {
            FilterModeArg::Tag => FilterMode::TagOnly,
            FilterModeArg::Reject => FilterMode::Reject,
        },
        max_steer_theta_deg: a.max_steer_theta,
    };
    // Validates the array shape and state count before any work.
    crate::domain::MsfConfig::uniform(opts.n_rows, opts.n_cols, opts.n_states, 0)?;
    log_run(&dir, "generate", Some(a.seed), a)?;

    let key = GenerationKey {
        seed: a.seed,
        n_rows: opts.n_rows,
        n_cols: opts.n_cols,
        n_states: opts.n_states,
        params: opts.params,
        grid: opts.grid.clone(),
        criteria: opts.criteria,
        filter_mode: opts.filter_mode,
        max_steer_theta_deg: opts.max_steer_theta_deg,
    };
    let partial = sidecar(&out, ".partial");
    let key_path = sidecar(&out, ".partial.key.json");
    let key_text = to_json_pretty(&key)?;
    let mut records = Vec::new();
    if partial.exists() && fs::read_to_string(&key_path).ok().as_deref() == Some(key_text.as_str()) {
        records = read_partial(&partial, &opts)?;
        log::info!("resuming from {} existing samples in {}", records.len(), partial.display());
    } else {
        write_text(&partial, "")?;
        write_text(&key_path, &key_text)?;
    }
    records.truncate(a.count as usize);
    let mut sink = OpenOptions::new()
        .append(true)
        .open(&partial)
        .map_err(|e| Error::io(&partial, e))?;
    let mut start = records.len() as u64;
    while start < a.count {
        let end = (start + a.chunk).min(a.count);
        let chunk = generate_records(a.seed, start..end, &opts, None)?;
        let mut buf = String::new();
        for r in &chunk {
            buf.push_str(&r.to_json_line()?);
        }
        sink.write_all(buf.as_bytes()).map_err(|e| Error::io(&partial, e))?;
        sink.flush().map_err(|e| Error::io(&partial, e))?;
        records.extend(chunk);
        start = end;
        log::info!("generated {start}/{} samples", a.count);
    }
    drop(sink);
    let dataset = Dataset::from_records(records, a.seed, &opts);
    let tmp = sidecar(&out, ".tmp");
    dataset.save(&tmp)?;
    fs::rename(&tmp, &out).map_err(|e| Error::io(&out, e))?;
    let _ = fs::remove_file(&partial);
    let _ = fs::remove_file(&key_path);
    let c = &dataset.provenance.counts;
    let interpretable = dataset.records.iter().filter(|r| r.meta.interpretable).count();
    println!(
        "wrote {} samples to {} (train {}, validation {}, test {}; {} interpretable)",
        dataset.len(),
        out.display(),
        c.train,
        c.validation,
        c.test,
        interpretable
    );
    Ok(())
}

fn is_tabulated(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn train_config(a: &TrainArgs, lambda: f64) -> TrainConfig {
    TrainConfig {
        optimizer: match a.model {
            ModelKind::Cnn => crate::neural::Optimizer::Sgd,
            _ => crate::neural::Optimizer::Scg,
        },
        l2_lambda: lambda,
        l2_mode: match a.l2_mode {
            L2ModeArg::Mean => L2Mode::Mean,
            L2ModeArg::Sum => L2Mode::Sum,
        },
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        decay: a.decay,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        max_iterations: a.max_iterations,
        patience: a.patience,
        grad_tol: 1e-8,
        mse_goal: a.mse_goal,
        spread: a.spread,
        max_centers: Some(a.max_centers),
        seed: a.seed,
    }
}

struct Trained {
    model: SurrogateModel,
    outcome: Option<TrainOutcome>,
    train_mse: f64,
    val_mse: Option<f64>,
    stop_reason: String,
}

fn final_mses(outcome: &TrainOutcome) -> (f64, Option<f64>) {
    let best = outcome.history.iter().find(|h| h.step == outcome.best_step);
    (
        best.map_or(f64::NAN, |h| h.train_mse),
        Some(outcome.best_val_mse).filter(|v| v.is_finite()),
    )
}

/// Trains one network of `kind` on `(x, y)` with validation `(xv, yv)`.
fn fit(
    kind: ModelKind,
    cnn_shape: Option<(usize, usize)>,
    train: (&Array2<f64>, &Array2<f64>),
    val: (&Array2<f64>, &Array2<f64>),
    cfg: &TrainConfig,
) -> Result<Trained> {
    let (n_in, n_out) = (train.0.ncols(), train.1.ncols());
    match kind {
        ModelKind::Mlp => {
            let mut m = Mlp::new(&[n_in, 100, 100, n_out], Activation::Tanh, cfg.seed)?;
            let outcome = train_scg(&mut m, train, val, cfg)?;
            let (train_mse, val_mse) = final_mses(&outcome);
            Ok(Trained {
                model: SurrogateModel::Mlp(m),
                stop_reason: outcome.stop_reason.clone(),
                outcome: Some(outcome),
                train_mse,
                val_mse,
            })
        }
        ModelKind::Cnn => {
            let (h, w) = cnn_shape.ok_or_else(|| {
                Error::Validation("the CNN needs a corpus of unit-cell images, not tabulated features".into())
            })?;
            let mut arch = CnnArch::surrogate(h, w);
            arch.n_outputs = n_out;
            let mut m = Cnn::new(arch, cfg.seed)?;
            let outcome = train_sgd(&mut m, train, val, cfg)?;
            let (train_mse, val_mse) = final_mses(&outcome);
            Ok(Trained {
                model: SurrogateModel::Cnn(m),
                stop_reason: outcome.stop_reason.clone(),
                outcome: Some(outcome),
                train_mse,
                val_mse,
            })
        }
        ModelKind::Rbf => {
            let fit = train_rbf(
                train.0,
                train.1,
                &RbfConfig {
                    spread: cfg.spread,
                    mse_goal: cfg.mse_goal,
                    max_centers: cfg.max_centers,
                    ..RbfConfig::default()
                },
            )?;
            let val_mse = if val.0.nrows() > 0 {
                Some(crate::neural::mse(&fit.model.predict(val.0)?, val.1))
            } else {
                None
            };
            Ok(Trained {
                model: SurrogateModel::Rbf(fit.model),
                outcome: None,
                train_mse: fit.train_mse,
                val_mse,
                stop_reason: fit.stop_reason,
            })
        }
    }
}

fn write_history(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    outcome.write_history_csv(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn train(a: &TrainArgs) -> Result<()> {
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| default_out_dir().join(format!("{}.json", model_name(a.model))));
    let dir = parent_dir(&out);
    // Load before logging so a missing dataset fails with an I/O error first.
    let source = if is_tabulated(&a.dataset) {
        let file = File::open(&a.dataset).map_err(|e| Error::io(&a.dataset, e))?;
        Source::Tabulated(read_tabulated_patterns(file, a.seed)?)
    } else {
        Source::Corpus(Box::new(Dataset::load(&a.dataset)?))
    };
    log_run(&dir, "train", Some(a.seed), a)?;

    let (x, y, xv, yv, cnn_shape, normalization, context) = match &source {
        Source::Corpus(ds) => {
            let (mut x, mut y) = ds.design_matrices(Split::Train)?;
            if let Some(n) = a.train_subset {
                let n = n.min(x.nrows());
                x = x.slice(ndarray::s![..n, ..]).to_owned();
                y = y.slice(ndarray::s![..n, ..]).to_owned();
            }
            let (xv, yv) = ds.design_matrices(Split::Validation)?;
            let ctx = ModelContext {
                n_rows: ds.n_rows,
                n_cols: ds.n_cols,
                n_states: ds.n_states,
                params: ds.params,
                grid: ds.grid.clone(),
                criteria: ds.provenance.criteria,
            };
            (x, y, xv, yv, Some((ds.n_rows, ds.n_cols)), Some(ds.normalization.clone()), Some(ctx))
        }
        Source::Tabulated(t) => {
            let (x, y) = t.rows(&t.train);
            let (xv, yv) = (Array2::zeros((0, x.ncols())), Array2::zeros((0, y.ncols())));
            (x, y, xv, yv, None, None, None)
        }
    };
    if x.nrows() == 0 {
        return Err(Error::Validation("no training samples with finite targets".into()));
    }

    let mut lambda = a.lambda;
    if let Some(cands) = &a.cv_lambda {
        if a.model == ModelKind::Rbf {
            return Err(Error::Validation("--cv-lambda applies to the MLP and CNN only".into()));
        }
        let cv_cfg = TrainConfig {
            max_iterations: a.cv_iterations,
            ..train_config(a, lambda)
        };
        let n = x.nrows();
        let (xs, ys) = if a.cv_subsample < n {
            let mut idx = SeededRng::child(a.seed, 0x5b).sample_indices(n, a.cv_subsample);
            idx.sort_unstable();
            (x.select(Axis(0), &idx), y.select(Axis(0), &idx))
        } else {
            (x.clone(), y.clone())
        };
        let n_in = xs.ncols();
        let n_out = ys.ncols();
        let report = cross_validate_lambda(&xs, &ys, cands, 10, &cv_cfg, || {
            Mlp::new(&[n_in, 100, 100, n_out], Activation::Tanh, a.seed)
        })?;
        println!(
            "10-fold cross-validation on {} samples ({} SCG iterations per fit):",
            report.n_samples, a.cv_iterations
        );
        print!("{}", report.table());
        let cv_path = sidecar(&out, ".cv.csv");
        let file = File::create(&cv_path).map_err(|e| Error::io(&cv_path, e))?;
        report.write_csv(BufWriter::new(file)).map_err(|e| Error::io(&cv_path, e))?;
        lambda = report.best_lambda;
        println!("selected lambda = {lambda}");
    }

    let cfg = train_config(a, lambda);
    cfg.validate()?;
    let trained = if a.per_measure {
        let mut members = Vec::new();
        let mut outcome = None;
        let (mut train_mse, mut val_mse, mut reasons) = (0.0, Some(0.0), Vec::new());
        for k in 0..y.ncols() {
            let col = |m: &Array2<f64>| m.slice(ndarray::s![.., k..k + 1]).to_owned();
            let t = fit(a.model, cnn_shape, (&x, &col(&y)), (&xv, &col(&yv)), &cfg)?;
            members.push(t.model);
            train_mse += t.train_mse / y.ncols() as f64;
            val_mse = val_mse.zip(t.val_mse).map(|(s, v)| s + v / y.ncols() as f64);
            reasons.push(t.stop_reason);
            if k == 0 {
                outcome = t.outcome;
            }
        }
        Trained {
            model: SurrogateModel::PerMeasure(members),
            outcome,
            train_mse,
            val_mse,
            stop_reason: reasons.join("; "),
        }
    } else {
        fit(a.model, cnn_shape, (&x, &y), (&xv, &yv), &cfg)?
    };

    let history_path = a.history.clone().unwrap_or_else(|| sidecar(&out, ".history.csv"));
    if let Some(outcome) = &trained.outcome {
        write_history(&history_path, outcome)?;
    }
    let file = ModelFile {
        model: trained.model,
        normalization,
        train_meta: TrainMeta {
            seed: a.seed,
            optimizer: match a.model {
                ModelKind::Mlp => "scg",
                ModelKind::Cnn => "sgd",
                ModelKind::Rbf => "greedy_least_squares",
            }
            .into(),
            final_train_mse: Some(trained.train_mse),
            final_val_mse: trained.val_mse,
            l2_lambda: lambda,
            l2_mode: cfg.l2_mode,
            stop_reason: trained.stop_reason.clone(),
            context,
        },
    };
    save_model(&out, &file)?;
    println!(
        "trained {} on {} samples: train mse {:.6e}, validation mse {} ({})",
        model_name(a.model),
        x.nrows(),
        trained.train_mse,
        trained.val_mse.map_or("-".into(), |v| format!("{v:.6e}")),
        trained.stop_reason
    );
    if let Source::Tabulated(t) = &source {
        let (xt, yt) = t.rows(&t.test);
        if xt.nrows() > 0 {
            let r2 = r_squared(&file.model.predict(&xt)?, &yt)?;
            println!("held-out R^2 = {r2:.6}");
        }
    }
    println!("model written to {}", out.display());
    Ok(())
}

enum Source {
    Corpus(Box<Dataset>),
    Tabulated(TabulatedData),
}

fn model_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Mlp => "mlp",
        ModelKind::Cnn => "cnn",
        ModelKind::Rbf => "rbf",
    }
}

/// Family name of a model for report columns ("mlp", "cnn", ...).
fn family(model: &SurrogateModel) -> &'static str {
    match model {
        SurrogateModel::PerMeasure(ms) => ms.first().map_or("per_measure", family),
        other => other.kind(),
    }
}

#[derive(Serialize)]
struct EvaluationOutput {
    dataset: String,
    split: SplitArg,
    gated: bool,
    reports: Vec<AccuracyReport>,
    /// R² of each model over the standardized finite targets.
    r_squared: Vec<Option<f64>>,
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let models: Vec<ModelFile> = a.model.iter().map(load_model).collect::<Result<_>>()?;
    log_run(&a.out, "evaluate", None, a)?;
    let split: Split = a.split.into();
    let keep: Vec<bool> = ds
        .split(split)
        .map(|r| !a.gated || r.meta.interpretable)
        .collect();
    let spec = ToleranceSpec::default();
    let mut reports = Vec::new();
    let mut r2s = Vec::new();
    let mut curves = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut unique = |base: &str| {
        let mut name = base.to_string();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{base}{k}");
            k += 1;
        }
        names.push(name.clone());
        name
    };

    let mut score = |name: String,
                     preds: Vec<crate::measures::PatternMeasures>,
                     targets: Vec<crate::measures::PatternMeasures>|
     -> Result<()> {
        let (p, t): (Vec<_>, Vec<_>) = preds
            .into_iter()
            .zip(targets)
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(pt, _)| pt)
            .unzip();
        let errors = measure_errors(&p, &t)?;
        let family_name = name.trim_end_matches(char::is_numeric).to_string();
        let mut report = report_from_errors(&errors, &spec, &family_name);
        report.model = name.clone();
        reports.push(report);
        let finite: Vec<usize> = (0..t.len()).filter(|&i| t[i].is_finite()).collect();
        let r2 = if finite.is_empty() {
            None
        } else {
            let z = |m: &crate::measures::PatternMeasures| {
                let v = m.to_array();
                (0..5)
                    .map(|k| (v[k] - ds.normalization.target_mean[k]) / ds.normalization.target_scale[k])
                    .collect::<Vec<_>>()
            };
            let pz: Vec<f64> = finite.iter().flat_map(|&i| z(&p[i])).collect();
            let tz: Vec<f64> = finite.iter().flat_map(|&i| z(&t[i])).collect();
            let shape = (finite.len(), 5);
            r_squared(
                &Array2::from_shape_vec(shape, pz).expect("sized"),
                &Array2::from_shape_vec(shape, tz).expect("sized"),
            )
            .ok()
        };
        r2s.push(r2);
        if a.curves {
            curves.extend(accuracy_curves(&errors, &name));
        }
        Ok(())
    };

    if a.self_test {
        let t: Vec<_> = ds.split(split).map(|r| r.measures).collect();
        score(unique("perfect"), t.clone(), t)?;
    }
    for m in &models {
        let (p, t) = predictions_for_split(m, &ds, split)?;
        score(unique(family(&m.model)), p, t)?;
    }

    print!("{}", format_reports(&reports));
    for (r, r2) in reports.iter().zip(&r2s) {
        if let Some(v) = r2 {
            println!("{}: R^2 (standardized targets) = {v:.4}", r.model);
        }
    }
    let output = EvaluationOutput {
        dataset: a.dataset.display().to_string(),
        split: a.split,
        gated: a.gated,
        reports: reports.clone(),
        r_squared: r2s,
    };
    write_text(&a.out.join("report.json"), &to_json_pretty(&output)?)?;
    write_text(&a.out.join("report.txt"), &format_reports(&reports))?;
    if a.curves {
        let path = a.out.join("curves.csv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        emit_curves(&curves, &mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let file = load_model(&a.model)?;
    if let Some(dir) = &a.out {
        log_run(dir, "predict", None, a)?;
    }
    let mut criteria = file
        .train_meta
        .context
        .as_ref()
        .map_or_else(FilterCriteria::default, |c| c.criteria);
    if let Some(v) = a.min_directivity {
        criteria.min_directivity_db = v;
    }
    if let Some(v) = a.min_pslr {
        criteria.min_pslr_db = v;
    }
    let outcome = predict_gated(&config, &file, (!a.no_gate).then_some(&criteria))?;
    let text = to_json_pretty(&outcome)?;
    print!("{text}");
    if let Some(dir) = &a.out {
        write_text(&dir.join("prediction.json"), &text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_tags_every_numeric_default() {
        let mut cmd = Cli::command();
        for sub in ["train", "generate", "simulate"] {
            let help = cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string();
            assert!(help.contains("[published") || sub == "simulate", "{sub}");
            assert!(help.contains("[toolkit default"), "{sub}");
        }
    }

    #[test]
    fn zero_count_is_a_usage_error() {
        assert_eq!(main_with_args(["msfnet", "generate", "--count", "0"]), 2);
    }
}
