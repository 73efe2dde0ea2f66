use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, Cnn, CnnArch, L2Mode, Mlp, NeuralModel, Rbf};
use crate::datagen::{FilterCriteria, Normalization};
use crate::domain::{AngularGrid, PhysicalParams};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained network of any supported family.
#[derive(Debug, Clone, PartialEq)]
pub enum SurrogateModel {
    Mlp(Mlp),
    Cnn(Cnn),
    Rbf(Rbf),
    /// Independent single-output members whose outputs are concatenated.
    PerMeasure(Vec<SurrogateModel>),
}

impl SurrogateModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SurrogateModel::Mlp(_) => "mlp",
            SurrogateModel::Cnn(_) => "cnn",
            SurrogateModel::Rbf(_) => "rbf",
            SurrogateModel::PerMeasure(_) => "per_measure",
        }
    }

    pub fn n_inputs(&self) -> usize {
        match self {
            SurrogateModel::Mlp(m) => m.n_inputs(),
            SurrogateModel::Cnn(m) => m.n_inputs(),
            SurrogateModel::Rbf(m) => m.n_inputs(),
            SurrogateModel::PerMeasure(ms) => ms.first().map_or(0, SurrogateModel::n_inputs),
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self {
            SurrogateModel::Mlp(m) => m.n_outputs(),
            SurrogateModel::Cnn(m) => m.n_outputs(),
            SurrogateModel::Rbf(m) => m.n_outputs(),
            SurrogateModel::PerMeasure(ms) => ms.iter().map(SurrogateModel::n_outputs).sum(),
        }
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            SurrogateModel::Mlp(m) => m.predict(x),
            SurrogateModel::Cnn(m) => m.predict(x),
            SurrogateModel::Rbf(m) => m.predict(x),
            SurrogateModel::PerMeasure(ms) => {
                let parts: Vec<Array2<f64>> = ms.iter().map(|m| m.predict(x)).collect::<Result<_>>()?;
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                ndarray::concatenate(ndarray::Axis(1), &views)
                    .map_err(|e| Error::Shape(format!("per-measure outputs: {e}")))
            }
        }
    }

    fn descriptor(&self) -> ArchDescriptor {
        match self {
            SurrogateModel::Mlp(m) => ArchDescriptor::Mlp {
                sizes: m.sizes().to_vec(),
                hidden: m.hidden_activation(),
            },
            SurrogateModel::Cnn(m) => ArchDescriptor::Cnn(m.arch().clone()),
            SurrogateModel::Rbf(m) => ArchDescriptor::Rbf {
                n_inputs: m.n_inputs(),
                n_outputs: m.n_outputs(),
                n_centers: m.n_centers(),
                spread: m.spread(),
            },
            SurrogateModel::PerMeasure(ms) => ArchDescriptor::PerMeasure {
                members: ms.iter().map(SurrogateModel::descriptor).collect(),
            },
        }
    }

    fn weight_arrays(&self) -> Vec<Vec<f64>> {
        match self {
            SurrogateModel::Mlp(m) => m.layer_arrays(),
            SurrogateModel::Cnn(m) => m.layer_arrays(),
            SurrogateModel::Rbf(m) => vec![
                m.centers().iter().copied().collect(),
                m.weights().iter().copied().collect(),
                m.bias().to_vec(),
            ],
            SurrogateModel::PerMeasure(ms) => ms.iter().flat_map(SurrogateModel::weight_arrays).collect(),
        }
    }

    fn from_parts(arch: &ArchDescriptor, arrays: &[Vec<f64>]) -> Result<Self> {
        if arrays.len() != arch.n_arrays() {
            return Err(Error::Parse(format!(
                "model has {} weight arrays, architecture needs {}",
                arrays.len(),
                arch.n_arrays()
            )));
        }
        Ok(match arch {
            ArchDescriptor::Mlp { sizes, hidden } => SurrogateModel::Mlp(Mlp::from_layer_arrays(sizes, *hidden, arrays)?),
            ArchDescriptor::Cnn(a) => SurrogateModel::Cnn(Cnn::from_layer_arrays(a.clone(), arrays)?),
            ArchDescriptor::Rbf {
                n_inputs,
                n_outputs,
                n_centers,
                spread,
            } => {
                let shape_err = |e: ndarray::ShapeError| Error::Parse(format!("RBF weights: {e}"));
                let centers = Array2::from_shape_vec((*n_centers, *n_inputs), arrays[0].clone()).map_err(shape_err)?;
                let weights = Array2::from_shape_vec((*n_centers, *n_outputs), arrays[1].clone()).map_err(shape_err)?;
                SurrogateModel::Rbf(Rbf::new(centers, *spread, weights, Array1::from(arrays[2].clone()))?)
            }
            ArchDescriptor::PerMeasure { members } => {
                let mut out = Vec::with_capacity(members.len());
                let mut off = 0;
                for m in members {
                    let k = m.n_arrays();
                    out.push(Self::from_parts(m, &arrays[off..off + k])?);
                    off += k;
                }
                SurrogateModel::PerMeasure(out)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ArchDescriptor {
    Mlp {
        sizes: Vec<usize>,
        hidden: Activation,
    },
    Cnn(CnnArch),
    Rbf {
        n_inputs: usize,
        n_outputs: usize,
        n_centers: usize,
        spread: f64,
    },
    PerMeasure {
        members: Vec<ArchDescriptor>,
    },
}

impl ArchDescriptor {
    fn n_arrays(&self) -> usize {
        match self {
            ArchDescriptor::Mlp { sizes, .. } => 2 * sizes.len().saturating_sub(1),
            ArchDescriptor::Cnn(a) => 2 * (a.filters.len() + 2),
            ArchDescriptor::Rbf { .. } => 3,
            ArchDescriptor::PerMeasure { members } => members.iter().map(ArchDescriptor::n_arrays).sum(),
        }
    }
}

/// Physical and dataset context a model was trained under; lets prediction
/// re-use the same grid and interpretability criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContext {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_states: u16,
    pub params: PhysicalParams,
    pub grid: AngularGrid,
    pub criteria: FilterCriteria,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub optimizer: String,
    pub final_train_mse: Option<f64>,
    pub final_val_mse: Option<f64>,
    pub l2_lambda: f64,
    pub l2_mode: L2Mode,
    pub stop_reason: String,
    pub context: Option<ModelContext>,
}

/// A model plus everything needed to use it on raw configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: SurrogateModel,
    pub normalization: Option<Normalization>,
    pub train_meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format_version: u32,
    arch: ArchDescriptor,
    normalization: Option<Normalization>,
    weights: Vec<Vec<f64>>,
    train_meta: TrainMeta,
}

fn finite_or_none(v: Option<f64>) -> Option<f64> {
    v.filter(|x| x.is_finite())
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        let weights = self.model.weight_arrays();
        if weights.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("refusing to save a model with non-finite weights".into()));
        }
        let mut meta = self.train_meta.clone();
        meta.final_train_mse = finite_or_none(meta.final_train_mse);
        meta.final_val_mse = finite_or_none(meta.final_val_mse);
        let doc = ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            arch: self.model.descriptor(),
            normalization: self.normalization.clone(),
            weights,
            train_meta: meta,
        };
        let mut s = serde_json::to_string(&doc).map_err(|e| Error::Parse(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("corrupt model file: {e}")))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Parse("model file lacks a format_version".into()))?;
        if found != u64::from(MODEL_FORMAT_VERSION) {
            return Err(Error::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let doc: ModelDocument =
            serde_json::from_value(value).map_err(|e| Error::Parse(format!("corrupt model file: {e}")))?;
        let model = SurrogateModel::from_parts(&doc.arch, &doc.weights)?;
        Ok(Self {
            model,
            normalization: doc.normalization,
            train_meta: doc.train_meta,
        })
    }
}

pub fn save_model(path: impl AsRef<Path>, file: &ModelFile) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, file.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelFile::from_json(&text)
}
