//! JSON checkpoints for single cells and whole models.
//!
//! Numbers are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use lrn_core::cells::{CellWeights, WEIGHT_NAMES};
use lrn_core::tasks::TaskId;
use lrn_core::training::{InputSpec, Model, ModelConfig};
use lrn_core::{CellParams, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MODEL_FORMAT: &str = "lrn-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Matrix> for MatrixJson {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }
}

impl TryFrom<MatrixJson> for Matrix {
    type Error = Error;

    fn try_from(m: MatrixJson) -> Result<Self> {
        Ok(Matrix::new(m.rows, m.cols, m.data)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CellJson {
    kind: String,
    activation: String,
    d_in: usize,
    d: usize,
    weights: BTreeMap<String, MatrixJson>,
}

impl From<&CellParams> for CellJson {
    fn from(p: &CellParams) -> Self {
        Self {
            kind: p.kind().to_string(),
            activation: p.activation().to_string(),
            d_in: p.d_in(),
            d: p.d(),
            weights: p.weights.entries().map(|(n, m)| (n.to_string(), m.into())).collect(),
        }
    }
}

impl TryFrom<CellJson> for CellParams {
    type Error = Error;

    fn try_from(c: CellJson) -> Result<Self> {
        let mut slots = c.weights;
        if let Some(name) = slots.keys().find(|k| !WEIGHT_NAMES.contains(&k.as_str())) {
            return Err(Error::Checkpoint(format!("unknown parameter {name:?}")));
        }
        let mut take = |name: &str| slots.remove(name).map(Matrix::try_from).transpose();
        let weights = CellWeights {
            w_q: take("w_q")?,
            b_q: take("b_q")?,
            w_k: take("w_k")?,
            b_k: take("b_k")?,
            w_v: take("w_v")?,
            b_v: take("b_v")?,
            w_o: take("w_o")?,
            b_o: take("b_o")?,
            w: take("w")?,
            u: take("u")?,
            b: take("b")?,
        };
        Ok(CellParams::from_weights(c.kind.parse()?, c.activation.parse()?, c.d_in, c.d, weights)?)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum InputJson {
    Features { width: usize },
    Tokens { vocab: usize, dim: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelJson {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<String>,
    kind: String,
    activation: String,
    input: InputJson,
    d: usize,
    layers: usize,
    outputs: usize,
    embedding: Option<MatrixJson>,
    cells: Vec<CellJson>,
    head_w: MatrixJson,
    head_b: MatrixJson,
}

/// A trained model plus the task it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub task: Option<TaskId>,
    pub model: Model,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let c = m.config();
        let doc = ModelJson {
            format: MODEL_FORMAT.to_string(),
            version: FORMAT_VERSION,
            task: self.task.map(|t| t.to_string()),
            kind: c.kind.to_string(),
            activation: c.activation.to_string(),
            input: match c.input {
                InputSpec::Features(width) => InputJson::Features { width },
                InputSpec::Tokens { vocab, dim } => InputJson::Tokens { vocab, dim },
            },
            d: c.d,
            layers: c.layers,
            outputs: c.outputs,
            embedding: m.embedding.as_ref().map(Into::into),
            cells: m.cells.iter().map(Into::into).collect(),
            head_w: (&m.head_w).into(),
            head_b: (&m.head_b).into(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelJson = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT || doc.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", doc.format, doc.version)));
        }
        let config = ModelConfig {
            kind: doc.kind.parse()?,
            activation: doc.activation.parse()?,
            input: match doc.input {
                InputJson::Features { width } => InputSpec::Features(width),
                InputJson::Tokens { vocab, dim } => InputSpec::Tokens { vocab, dim },
            },
            d: doc.d,
            layers: doc.layers,
            outputs: doc.outputs,
        };
        let cells = doc.cells.into_iter().map(CellParams::try_from).collect::<Result<_>>()?;
        let model = Model::from_parts(
            config,
            doc.embedding.map(Matrix::try_from).transpose()?,
            cells,
            doc.head_w.try_into()?,
            doc.head_b.try_into()?,
        )?;
        let task = doc.task.map(|t| t.parse()).transpose()?;
        Ok(Self { task, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Standalone cell parameters as JSON.
pub fn cell_to_json(p: &CellParams) -> Result<String> {
    Ok(serde_json::to_string(&CellJson::from(p))?)
}

pub fn cell_from_json(text: &str) -> Result<CellParams> {
    serde_json::from_str::<CellJson>(text)?.try_into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lrn_core::training::TrainConfig;
    use lrn_core::{Activation, CellKind, Rng};

    #[test]
    fn cell_round_trip_is_exact() {
        for kind in CellKind::ALL {
            let mut rng = Rng::new(4);
            let p: CellParams = CellParams::new(kind, kind.default_activation(), 3, 5, &mut rng).unwrap();
            let back = cell_from_json(&cell_to_json(&p).unwrap()).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        for task in TaskId::ALL {
            let c = TrainConfig::new(task, CellKind::Lrn);
            let model = Model::new(c.model_config(), &mut Rng::new(8)).unwrap();
            let ck = Checkpoint { task: Some(task), model };
            assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
        }
    }

    #[test]
    fn rejects_foreign_parameters() {
        let p: CellParams = CellParams::new(CellKind::Elrn, Activation::Tanh, 2, 2, &mut Rng::new(1)).unwrap();
        let text = cell_to_json(&p).unwrap().replace("\"w_v\"", "\"w_q\"");
        assert!(cell_from_json(&text).is_err());
        let text = cell_to_json(&p).unwrap().replace("\"w_v\"", "\"w_z\"");
        assert!(cell_from_json(&text).is_err());
    }
}
