//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `TOMOSEG1`, a little-endian `u64` manifest
//! length, a JSON manifest, then every tensor group as raw little-endian
//! `f32`. The manifest lists each named tensor with its shape and offset, so
//! a file can be inspected without this crate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::segnet::{Model, ModelConfig, SegNet};
use crate::volume::write_atomic;

const MAGIC: &[u8; 8] = b"TOMOSEG1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    stage: u8,
    epoch: usize,
    seed: u64,
    teacher_updates: u64,
    adam: Option<(AdamConfig, u64)>,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Training stage that produced the weights (2 or 3).
    pub stage: u8,
    /// Number of completed epochs of that stage.
    pub epoch: usize,
    pub seed: u64,
    pub student: Vec<f32>,
    pub teacher: Option<Vec<f32>>,
    pub teacher_updates: u64,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    /// The deployable model: the teacher when present, otherwise the student.
    pub fn deployed(&self) -> Result<Model> {
        let params = self.teacher.clone().unwrap_or_else(|| self.student.clone());
        self.model_with(params)
    }

    pub fn student_model(&self) -> Result<Model> {
        self.model_with(self.student.clone())
    }

    fn model_with(&self, params: Vec<f32>) -> Result<Model> {
        let net = SegNet::new(self.model.clone())?;
        if params.len() != net.param_count() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters but the configured network needs {}",
                params.len(),
                net.param_count()
            )));
        }
        Ok(Model { net, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = SegNet::new(self.model.clone())?;
        let mut tensors = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut push_tree = |group: &str, params: &[f32], payload: &mut Vec<f32>| {
            let base = payload.len();
            for e in &net.layout().entries {
                tensors.push(TensorRecord {
                    group: group.into(),
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    offset: base + e.offset,
                });
            }
            payload.extend_from_slice(params);
        };
        push_tree("student", &self.student, &mut payload);
        if let Some(t) = &self.teacher {
            push_tree("teacher", t, &mut payload);
        }
        if let Some(opt) = &self.optimizer {
            push_tree("adam.m", &opt.m, &mut payload);
            push_tree("adam.v", &opt.v, &mut payload);
        }
        let manifest = Manifest {
            model: self.model.clone(),
            stage: self.stage,
            epoch: self.epoch,
            seed: self.seed,
            teacher_updates: self.teacher_updates,
            adam: self.optimizer.as_ref().map(|o| (o.cfg, o.step)),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a tomoseg checkpoint (bad magic)".into()));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + n)
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let raw = &bytes[16 + n..];
        if raw.len() % 4 != 0 {
            return Err(Error::Checkpoint("payload is not a whole number of f32 values".into()));
        }
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let net = SegNet::new(manifest.model.clone())?;
        let total = net.param_count();
        let group = |name: &str| -> Result<Option<Vec<f32>>> {
            let recs: Vec<&TensorRecord> = manifest.tensors.iter().filter(|t| t.group == name).collect();
            if recs.is_empty() {
                return Ok(None);
            }
            if recs.len() != net.layout().entries.len() {
                return Err(Error::Checkpoint(format!(
                    "group {name} has {} tensors, expected {}",
                    recs.len(),
                    net.layout().entries.len()
                )));
            }
            let mut out = vec![0.0; total];
            for (rec, entry) in recs.iter().zip(&net.layout().entries) {
                if rec.name != entry.name || rec.shape != entry.shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {}.{} {:?} does not match network slot {} {:?}",
                        name, rec.name, rec.shape, entry.name, entry.shape
                    )));
                }
                let src = payload
                    .get(rec.offset..rec.offset + entry.len())
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name}.{} runs past the payload", rec.name)))?;
                out[entry.range()].copy_from_slice(src);
            }
            Ok(Some(out))
        };
        let student = group("student")?.ok_or_else(|| Error::Checkpoint("missing student weights".into()))?;
        let teacher = group("teacher")?;
        let optimizer = match (manifest.adam, group("adam.m")?, group("adam.v")?) {
            (Some((cfg, step)), Some(m), Some(v)) => Some(Adam { cfg, m, v, step }),
            (None, None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete optimizer state".into())),
        };
        Ok(Self {
            model: manifest.model,
            stage: manifest.stage,
            epoch: manifest.epoch,
            seed: manifest.seed,
            student,
            teacher,
            teacher_updates: manifest.teacher_updates,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
