//! Run configuration: one JSON document with `data`, `model`, `mask`,
//! `loss`, `train` and `eval` sections, plus dotted-path overrides
//! (`loss.vtm=false`) checked against the default document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::masking::TextMaskStrategy;
use crate::model::ModelConfig;
use crate::objectives::LossConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Pairs to generate.
    pub n_clips: usize,
    pub seed: u64,
    /// Read an exported corpus from here instead of generating one.
    pub corpus_dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_clips: 2000, seed: 7, corpus_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub video_ratio: f64,
    pub text_ratio: f64,
    pub text_strategy: TextMaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { video_ratio: 0.9, text_ratio: 0.75, text_strategy: TextMaskStrategy::BertLike }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay on weight matrices.
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm bound; `null` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Train on only the first this-many training pairs.
    pub subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            max_steps: None,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 50,
            grad_clip: Some(1.0),
            seed: 0,
            subset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// `train`, `val` or `test`.
    pub split: String,
    /// Collapse pairs with identical captions into one query and one gallery video.
    pub dedup_captions: bool,
    /// Encoder layer whose attention is dumped; `null` means the last.
    pub attention_layer: Option<usize>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: "test".into(), dedup_captions: true, attention_layer: None, batch_size: 32 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(n) if n.is_u64() || n.is_i64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Whether `new` may replace `old` in the document. Numbers accept integers,
/// optional fields (default `null`) accept anything.
fn compatible(old: &Value, new: &Value) -> bool {
    match (old, new) {
        (Value::Null, _) | (_, Value::Null) => true,
        (Value::Number(o), Value::Number(n)) => !(o.is_u64() || o.is_i64()) || n.is_u64() || n.is_i64(),
        (Value::Array(o), Value::Array(n)) => o.len() == n.len() && o.iter().zip(n).all(|(a, b)| compatible(a, b)),
        _ => kind(old) == kind(new),
    }
}

/// Merges `patch` into `base`, rejecting keys absent from `base`.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| Error::Config(format!("unknown key `{sub}`")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (slot, v) => {
            if slot.is_object() || !compatible(slot, v) {
                return Err(Error::Config(format!("`{path}` expects {}, got {}", kind(slot), kind(v))));
            }
            *slot = v.clone();
            Ok(())
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with a (possibly partial) JSON document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let mut doc = serde_json::to_value(Self::default()).expect("defaults serialize");
        merge(&mut doc, &patch, "")?;
        Self::from_value(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn from_value(doc: Value) -> Result<Self> {
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `KEY=VALUE`. `VALUE` is read as JSON, or as a bare string
    /// where the field holds a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
        let key = key.trim();
        let mut doc = self.to_value();
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        }
        let value = match serde_json::from_str::<Value>(raw.trim()) {
            Ok(v) => v,
            Err(_) if slot.is_string() || slot.is_null() => Value::String(raw.trim().to_string()),
            Err(_) => return Err(Error::Config(format!("`{key}` expects {}, got `{raw}`", kind(slot)))),
        };
        if slot.is_object() || !compatible(slot, &value) {
            return Err(Error::Config(format!("`{key}` expects {}, got {}", kind(slot), kind(&value))));
        }
        *slot = value;
        *self = Self::from_value(doc).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("`{key}`: {m}")),
            other => other,
        })?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, r) in [("mask.video_ratio", self.mask.video_ratio), ("mask.text_ratio", self.mask.text_ratio)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        self.loss.switches().validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if t.batch_size == 0 || (self.loss.vtm && t.batch_size < 2) {
            return Err(Error::Config(format!("train.batch_size {} too small (matching needs 2)", t.batch_size)));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.eps <= 0.0 || t.weight_decay < 0.0 {
            return Err(Error::Config("train optimizer hyperparameters out of range".into()));
        }
        if t.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("train.grad_clip must be positive or null".into()));
        }
        if !["train", "val", "test"].contains(&self.eval.split.as_str()) {
            return Err(Error::Config(format!("eval.split `{}` is not train, val or test", self.eval.split)));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        if self.eval.attention_layer.is_some_and(|l| l >= self.model.depth) {
            return Err(Error::Config("eval.attention_layer beyond encoder depth".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_value()).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Dotted path of the first field where two JSON documents differ.
pub fn first_difference(a: &Value, b: &Value, path: &str) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(p), Some(q)) => first_difference(p, q, &sub),
                    _ => Some(sub),
                }
            })
        }
        _ => (a != b).then(|| path.to_string()),
    }
}
