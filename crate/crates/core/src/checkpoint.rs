//! Checkpoint directories: `manifest.json` plus a raw little-endian f32
//! blob `params.bin`.
//!
//! The manifest lists every tensor with its shape and element offset. Model
//! tensors use their parameter names; a training checkpoint adds optimizer
//! moments (`adam.m.*`, `adam.v.*`) and the carries of in-flight slots
//! (`slot.<i>.z`, `slot.<i>.y`) so that training resumes bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Carry, ModelConfig, ModelParams, Trm};
use crate::tensor::Tensor;
use crate::training::{AdamState, EvalRecord, Slot, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub sample: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epoch: usize,
    pub cursor: usize,
    pub adam_step: u64,
    pub slots: Vec<SlotEntry>,
    pub history: Vec<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub step: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub train: Option<TrainProgress>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write(dir: &Path, manifest: &Manifest, tensors: &[&Tensor<f32>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let total: usize = tensors.iter().map(|t| t.numel()).sum();
    let mut blob = Vec::with_capacity(total * 4);
    for t in tensors {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join(BLOB_FILE);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn entries(named: &[(String, &Tensor<f32>)]) -> Vec<TensorEntry> {
    let mut offset = 0;
    named
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect()
}

/// Writes model parameters only.
pub fn save_model(
    dir: &Path,
    model: &Trm<f32>,
    step: u64,
    metrics: BTreeMap<String, f64>,
) -> Result<()> {
    let p = model.params();
    let named: Vec<(String, &Tensor<f32>)> = p
        .names()
        .iter()
        .cloned()
        .zip(p.tensors().iter().map(|t| t.as_ref()))
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        step,
        metrics,
        tensors: entries(&named),
        train: None,
    };
    let ts: Vec<&Tensor<f32>> = named.iter().map(|(_, t)| *t).collect();
    write(dir, &manifest, &ts)
}

/// Writes the full training state.
pub fn save_train_state(
    dir: &Path,
    state: &TrainState<f32>,
    metrics: BTreeMap<String, f64>,
) -> Result<()> {
    let p = state.model.params();
    let mut named: Vec<(String, &Tensor<f32>)> = p
        .names()
        .iter()
        .cloned()
        .zip(p.tensors().iter().map(|t| t.as_ref()))
        .collect();
    for (name, m) in p.names().iter().zip(&state.adam.m) {
        named.push((format!("adam.m.{name}"), m));
    }
    for (name, v) in p.names().iter().zip(&state.adam.v) {
        named.push((format!("adam.v.{name}"), v));
    }
    for (i, s) in state.slots.iter().enumerate() {
        named.push((format!("slot.{i}.z"), s.carry.z.as_ref()));
        named.push((format!("slot.{i}.y"), s.carry.y.as_ref()));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: state.model.config().clone(),
        step: state.step,
        metrics,
        tensors: entries(&named),
        train: Some(TrainProgress {
            epoch: state.epoch,
            cursor: state.cursor,
            adam_step: state.adam.step,
            slots: state
                .slots
                .iter()
                .map(|s| SlotEntry {
                    sample: s.sample,
                    steps: s.steps,
                })
                .collect(),
            history: state.history.clone(),
        }),
    };
    let ts: Vec<&Tensor<f32>> = named.iter().map(|(_, t)| *t).collect();
    write(dir, &manifest, &ts)
}

/// A checkpoint read back from disk: manifest plus every tensor by name.
pub struct Loaded {
    pub manifest: Manifest,
    tensors: BTreeMap<String, Tensor<f32>>,
    dir: std::path::PathBuf,
}

impl Loaded {
    fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| corrupt(&self.dir, format!("missing tensor {name}")))
    }

    pub fn model(&mut self) -> Result<Trm<f32>> {
        let cfg = self.manifest.model.clone();
        cfg.validate()?;
        let mut named = Vec::new();
        for (name, _) in cfg.param_shapes() {
            named.push((name.clone(), self.take(&name)?));
        }
        let params =
            ModelParams::from_named(&cfg, named).map_err(|e| corrupt(&self.dir, e.to_string()))?;
        Trm::new(cfg, params)
    }

    pub fn train_state(mut self) -> Result<TrainState<f32>> {
        let model = self.model()?;
        let progress = self
            .manifest
            .train
            .clone()
            .ok_or_else(|| corrupt(&self.dir, "checkpoint has no training state"))?;
        let names: Vec<String> = model.params().names().to_vec();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in &names {
            m.push(self.take(&format!("adam.m.{name}"))?);
            v.push(self.take(&format!("adam.v.{name}"))?);
        }
        let mut slots = Vec::new();
        for (i, s) in progress.slots.iter().enumerate() {
            let z = self.take(&format!("slot.{i}.z"))?;
            let y = self.take(&format!("slot.{i}.y"))?;
            slots.push(Slot {
                sample: s.sample,
                steps: s.steps,
                carry: Carry {
                    z: Arc::new(z),
                    y: Arc::new(y),
                },
            });
        }
        Ok(TrainState {
            model,
            adam: AdamState {
                step: progress.adam_step,
                m,
                v,
            },
            step: self.manifest.step,
            epoch: progress.epoch,
            cursor: progress.cursor,
            slots,
            history: progress.history,
        })
    }
}

/// Reads a checkpoint directory. Unknown manifest fields are ignored; a
/// short blob or an out-of-range tensor is a corrupt-checkpoint error.
pub fn load(dir: &Path) -> Result<Loaded> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| corrupt(dir, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(
            dir,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() % 4 != 0 {
        return Err(corrupt(
            dir,
            format!("blob length {} is not a multiple of 4", blob.len()),
        ));
    }
    let floats = blob.len() / 4;
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e
            .offset
            .checked_add(n)
            .filter(|&end| end <= floats)
            .ok_or_else(|| {
                corrupt(
                    dir,
                    format!(
                        "tensor {} needs elements {}..{} but the blob holds {floats}",
                        e.name,
                        e.offset,
                        e.offset + n
                    ),
                )
            })?;
        let data: Vec<f32> = blob[e.offset * 4..end * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(corrupt(dir, format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(Loaded {
        manifest,
        tensors,
        dir: dir.to_path_buf(),
    })
}

pub fn load_model(dir: &Path) -> Result<Trm<f32>> {
    load(dir)?.model()
}

pub fn load_train_state(dir: &Path) -> Result<TrainState<f32>> {
    load(dir)?.train_state()
}
