//! Checkpoint container.
//!
//! Layout: the 8 magic bytes `PATCKPT1`, a little-endian `u64` header length,
//! the JSON header, then one PATN record per tensor listed in the header.
//! Records hold every parameter set entry in order, followed by the Adam
//! first and second moments of each trainable entry. All tensors are `f32`,
//! the training precision, so a resumed run continues bit for bit.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use pat_core::tensor_file::{TensorData, TensorFile};
use pat_nn::{AdamConfig, AdamState, ParamKind, Tensor, YNet, YNetConfig};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{PipelineError, Result};

pub const MAGIC: &[u8; 8] = b"PATCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Parameter,
    AdamFirstMoment,
    AdamSecondMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub name: String,
    pub kind: ParamKind,
    pub role: TensorRole,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: YNetConfig,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub adam_step: u64,
    /// Completed epochs.
    pub epochs_done: usize,
    pub tensors: Vec<TensorHeader>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: YNet<f32>,
    pub adam: AdamState<f32>,
    pub train: TrainConfig,
    pub epochs_done: usize,
}

fn bad(path: &Path, reason: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn record(t: &Tensor<f32>) -> TensorFile {
    TensorFile {
        shape: t.shape().to_vec(),
        data: TensorData::F32(t.data().to_vec()),
    }
}

impl Checkpoint {
    fn header(&self) -> CheckpointHeader {
        let p = &self.model.params;
        let mut tensors: Vec<TensorHeader> = p
            .entries()
            .iter()
            .map(|e| TensorHeader {
                name: e.name.clone(),
                kind: e.kind,
                role: TensorRole::Parameter,
                shape: e.value.shape().to_vec(),
            })
            .collect();
        for role in [TensorRole::AdamFirstMoment, TensorRole::AdamSecondMoment] {
            for i in p.trainable() {
                let e = p.entry(i);
                tensors.push(TensorHeader {
                    name: e.name.clone(),
                    kind: e.kind,
                    role,
                    shape: e.value.shape().to_vec(),
                });
            }
        }
        CheckpointHeader {
            model: self.model.config,
            train: self.train.clone(),
            adam: self.adam.config,
            adam_step: self.adam.step,
            epochs_done: self.epochs_done,
            tensors,
        }
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let tmp = path.with_extension("tmp");
        let io = |e| PipelineError::io(&tmp, e);
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        let moments = self.adam.m.iter().chain(&self.adam.v);
        for t in self.model.params.entries().iter().map(|e| &e.value).chain(moments) {
            record(t).write_to(&mut w).map_err(io)?;
        }
        w.flush().map_err(io)?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        let mut len = [0u8; 8];
        r.read_exact(&mut magic)
            .and_then(|_| r.read_exact(&mut len))
            .map_err(|_| bad(path, "truncated header"))?;
        if &magic != MAGIC {
            return Err(bad(path, "missing PATCKPT1 magic"));
        }
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(bad(path, format!("implausible header length {len}")));
        }
        let mut text = vec![0u8; len as usize];
        r.read_exact(&mut text).map_err(|_| bad(path, "truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&text).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })?;

        // the architecture fixes names, kinds and shapes
        let mut model = YNet::<f32>::init(header.model, 0)?;
        let mut adam = AdamState::new(header.adam, &model.params);
        adam.step = header.adam_step;
        let trainable = model.params.trainable();
        let expected = model.params.len() + 2 * trainable.len();
        if header.tensors.len() != expected {
            return Err(bad(path, format!("{} tensors listed, the model needs {expected}", header.tensors.len())));
        }
        for (k, th) in header.tensors.iter().enumerate() {
            let rec = TensorFile::read_from(&mut r, path)?;
            let TensorData::F32(values) = rec.data else {
                return Err(bad(path, format!("tensor '{}' is not f32", th.name)));
            };
            let np = model.params.len();
            let nt = trainable.len();
            let (owner, role) = match k {
                k if k < np => (k, TensorRole::Parameter),
                k if k < np + nt => (trainable[k - np], TensorRole::AdamFirstMoment),
                k => (trainable[k - np - nt], TensorRole::AdamSecondMoment),
            };
            let entry = model.params.entry(owner);
            if th.role != role || th.kind != entry.kind || th.name != entry.name || rec.shape != entry.value.shape() || th.shape != rec.shape {
                return Err(bad(
                    path,
                    format!("record {k} is '{}' {:?}, expected '{}' {:?}", th.name, rec.shape, entry.name, entry.value.shape()),
                ));
            }
            let slot = match role {
                TensorRole::Parameter => model.params.entry_mut(k).value.data_mut(),
                TensorRole::AdamFirstMoment => adam.m[k - np].data_mut(),
                TensorRole::AdamSecondMoment => adam.v[k - np - nt].data_mut(),
            };
            slot.copy_from_slice(&values);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| PipelineError::io(path, e))? != 0 {
            return Err(bad(path, "trailing bytes after the last record"));
        }
        Ok(Self {
            model,
            adam,
            train: header.train,
            epochs_done: header.epochs_done,
        })
    }
}

/// Checkpoint file name for the end of `epoch`.
pub fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Name of the checkpoint written when training completes.
pub const FINAL: &str = "final.ckpt";
