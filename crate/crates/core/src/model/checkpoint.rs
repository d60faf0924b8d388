//! Versioned binary checkpoints.
//!
//! ```text
//! "SSCK" | version u32
//! model config  : len u32 | TOML
//! config echo   : len u32 | UTF-8
//! norm stats    : flag u8 | [dim u32 | mean f64[dim] | var f64[dim]]
//! tensors       : count u32 | per tensor: name | kind u8 | ndim u32 | dims u64[ndim] | f32 data
//! training      : flag u8 | [adam step u64 | m, v tensors in store order
//!                 | epoch u64 | batches u64 | lr f64 | best f64 | since u32]
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelError, SpeakerNet};
use crate::corpus::NormStats;
use crate::numerics::{AdamState, ParamKind, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("checkpoint model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizer and schedule state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub adam: AdamState<f32>,
    pub epoch: u64,
    pub batches: u64,
    pub lr: f64,
    pub best_loss: f64,
    pub since_improvement: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Experiment configuration the run was started with.
    pub echo: String,
    pub norm: Option<NormStats>,
    pub params: ParamStore<f32>,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn network(&self) -> Result<SpeakerNet<f32>, ModelError> {
        SpeakerNet::from_params(self.model.clone(), self.params.clone())
    }

    /// Encoder tensors, configuration and normalization only.
    pub fn encoder_only(&self) -> Self {
        let mut params = ParamStore::new();
        for e in self.params.entries().iter().filter(|e| e.name.starts_with("encoder.")) {
            params.insert(e.name.clone(), e.kind, e.value.clone());
        }
        Self { model: self.model.clone(), echo: self.echo.clone(), norm: self.norm.clone(), params, training: None }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        let model = toml::to_string(&self.model).map_err(|e| CheckpointError::Config(e.to_string()))?;
        put_str(&mut w, &model);
        put_str(&mut w, &self.echo);
        match &self.norm {
            Some(n) => {
                w.push(1);
                put_u32(&mut w, n.dim() as u32);
                n.mean.iter().chain(&n.var).for_each(|v| w.extend_from_slice(&v.to_le_bytes()));
            }
            None => w.push(0),
        }
        put_u32(&mut w, self.params.len() as u32);
        for e in self.params.entries() {
            put_str(&mut w, &e.name);
            w.push(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            put_tensor(&mut w, &e.value);
        }
        match &self.training {
            Some(t) => {
                w.push(1);
                w.extend_from_slice(&t.adam.step.to_le_bytes());
                t.adam.m.iter().chain(&t.adam.v).for_each(|m| put_tensor(&mut w, m));
                w.extend_from_slice(&t.epoch.to_le_bytes());
                w.extend_from_slice(&t.batches.to_le_bytes());
                w.extend_from_slice(&t.lr.to_le_bytes());
                w.extend_from_slice(&t.best_loss.to_le_bytes());
                put_u32(&mut w, t.since_improvement);
            }
            None => w.push(0),
        }
        Ok(w)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format { offset: 0, detail: "bad magic".into() });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let model_text = r.string()?;
        let model: ModelConfig = toml::from_str(&model_text).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let echo = r.string()?;
        let norm = match r.u8()? {
            0 => None,
            1 => {
                let dim = r.u32()? as usize;
                let mean = r.f64s(dim)?;
                let var = r.f64s(dim)?;
                Some(NormStats { mean, var })
            }
            f => return Err(r.err(format!("invalid norm flag {f}"))),
        };
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(r.err(format!("invalid kind {k} for {name}"))),
            };
            let value = r.tensor()?;
            if params.id(&name).is_some() {
                return Err(r.err(format!("duplicate tensor {name}")));
            }
            params.insert(name, kind, value);
        }
        let training = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut moments = Vec::with_capacity(2 * count);
                for i in 0..2 * count {
                    let t = r.tensor()?;
                    let entry = &params.entries()[i % count];
                    if t.shape() != entry.value.shape() {
                        return Err(r.err(format!("optimizer moment shape mismatch for {}", entry.name)));
                    }
                    moments.push(t);
                }
                let v = moments.split_off(count);
                let adam = AdamState { step, m: moments, v };
                Some(TrainingState {
                    adam,
                    epoch: r.u64()?,
                    batches: r.u64()?,
                    lr: r.f64()?,
                    best_loss: r.f64()?,
                    since_improvement: r.u32()?,
                })
            }
            f => return Err(r.err(format!("invalid training flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model, echo, norm, params, training })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.encode()?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::decode(&fs::read(path)?)
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(w, t.shape().len() as u32);
    t.shape().iter().for_each(|&d| w.extend_from_slice(&(d as u64).to_le_bytes()));
    t.data().iter().for_each(|v| w.extend_from_slice(&v.to_le_bytes()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: String) -> CheckpointError {
        CheckpointError::Format { offset: self.pos, detail }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>, CheckpointError> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.err(format!("tensor rank {ndim} is implausible")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.err("tensor size overflows".into()))?;
        let raw = self.take(len)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| self.err(e.to_string()))
    }
}
