//! JSON checkpoints: configuration, conventions, feature statistics and
//! weights as nested arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::featkit::{Normalizer, FEATURE_LAYOUT};
use crate::geom::GRAVITY;
use crate::models::{DvseModel, ModelConfig, PREINT_SCALE, V_REF_SCALE};
use crate::nncore::{ParameterStore, Tensor, GRU_CONVENTION};
use crate::simkit::atomic_write;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "dvse-ckpt/1";
pub const EULER_CONVENTION: &str = "R=Rx(alpha)*Ry(beta)*Rz(gamma), phone->vehicle";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conventions {
    pub gru: String,
    pub feature_layout: String,
    pub euler: String,
    pub v_ref_scale: f64,
    pub preint_scale: f64,
    pub gravity: f64,
}

impl Conventions {
    pub fn current() -> Self {
        Conventions {
            gru: GRU_CONVENTION.to_string(),
            feature_layout: FEATURE_LAYOUT.to_string(),
            euler: EULER_CONVENTION.to_string(),
            v_ref_scale: V_REF_SCALE,
            preint_scale: PREINT_SCALE,
            gravity: GRAVITY,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub model: ModelConfig,
    pub conventions: Conventions,
    pub normalizer: Normalizer,
    /// Name → nested array in the tensor's shape.
    pub params: BTreeMap<String, Value>,
    pub metadata: TrainingMetadata,
}

fn nest(shape: &[usize], data: &[f64]) -> Value {
    match shape {
        [] | [_] => Value::Array(data.iter().map(|v| Value::from(*v)).collect()),
        [n, rest @ ..] => {
            let stride = data.len() / n.max(&1);
            Value::Array((0..*n).map(|i| nest(rest, &data[i * stride..(i + 1) * stride])).collect())
        }
    }
}

/// Flattens a nested array that must have exactly `shape`.
fn unnest(name: &str, v: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<()> {
    let bad = || Error::Checkpoint(format!("parameter `{name}` does not match shape {shape:?}"));
    let arr = v.as_array().ok_or_else(bad)?;
    if shape.is_empty() || arr.len() != shape[0] {
        return Err(bad());
    }
    if shape.len() == 1 {
        for x in arr {
            out.push(x.as_f64().ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` holds a non-number")))?);
        }
        return Ok(());
    }
    for x in arr {
        unnest(name, x, &shape[1..], out)?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_model(model: &DvseModel, metadata: TrainingMetadata) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            model: model.config.clone(),
            conventions: Conventions::current(),
            normalizer: model.normalizer.clone(),
            params: model.params.iter().map(|(k, t)| (k.clone(), nest(&t.shape, &t.data))).collect(),
            metadata,
        }
    }

    /// Validates everything against the declared configuration and builds
    /// the model.
    pub fn into_model(self) -> Result<DvseModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version `{}`, expected `{CHECKPOINT_VERSION}`",
                self.version
            )));
        }
        let want = Conventions::current();
        if self.conventions != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint conventions {:?} differ from {:?}",
                self.conventions, want
            )));
        }
        self.model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let nets = crate::models::DvseNets::layout(&self.model)?;
        let mut store = ParameterStore::new();
        for (name, shape) in nets.param_shapes() {
            let v = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let mut data = Vec::with_capacity(shape.iter().product());
            unnest(&name, v, &shape, &mut data)?;
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        if let Some(extra) = self.params.keys().find(|k| store.get(k).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        let nm = &self.normalizer;
        if nm.mean.len() != nm.std.len() || nm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Checkpoint("normalizer statistics are malformed".into()));
        }
        DvseModel::from_parts(self.model, store, self.normalizer)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }
}

pub fn checkpoint_save(model: &DvseModel, metadata: TrainingMetadata, path: &Path) -> Result<()> {
    let json = Checkpoint::from_model(model, metadata).to_json()?;
    atomic_write(path, json.as_bytes())
}

pub fn checkpoint_load(path: &Path) -> Result<(DvseModel, TrainingMetadata)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_json(&text)?;
    let meta = ckpt.metadata.clone();
    Ok((ckpt.into_model()?, meta))
}
