//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TSGC"  u32 version
//! u32 len, model config as JSON
//! u32 count, then per record: u8 kind, u32 len + name, u32 ndim,
//!     u32 dims..., f32 values...
//! u8 has_training; if 1: u64 epochs_done, u64 optimizer step
//! ```
//!
//! Record kinds are 0 parameter, 1 buffer, 2 first moment, 3 second
//! moment. Moments are named after their parameter.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TsgcNet};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: [u8; 4] = *b"TSGC";
pub const VERSION: u32 = 1;

const PARAM: u8 = 0;
const BUFFER: u8 = 1;
const MOMENT1: u8 = 2;
const MOMENT2: u8 = 3;

/// Optimizer progress saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub epochs_done: usize,
    pub adam: AdamState<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub training: Option<TrainingState>,
}

fn format_error(msg: impl Into<String>) -> Error {
    Error::Format {
        line: None,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn from_model(model: &TsgcNet<f32>, training: Option<TrainingState>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.store().clone(),
            training,
        }
    }

    pub fn into_model(self) -> Result<(TsgcNet<f32>, Option<TrainingState>)> {
        let model = TsgcNet::with_store(self.config, self.params)?;
        if let Some(t) = &self.training {
            if !t.adam.matches(model.store()) {
                return Err(format_error("optimizer moments do not match the parameters"));
            }
        }
        Ok((model, self.training))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        put_bytes(&mut out, &json);
        let mut records: Vec<(u8, &str, &Tensor<f32>)> = Vec::new();
        for p in self.params.params() {
            records.push((PARAM, &p.name, &p.value));
        }
        for (name, b) in self.params.buffers() {
            records.push((BUFFER, name, b));
        }
        if let Some(t) = &self.training {
            for (p, m) in self.params.params().iter().zip(&t.adam.m) {
                records.push((MOMENT1, &p.name, m));
            }
            for (p, v) in self.params.params().iter().zip(&t.adam.v) {
                records.push((MOMENT2, &p.name, v));
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (kind, name, t) in records {
            out.push(kind);
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.training {
            None => out.push(0),
            Some(t) => {
                out.push(1);
                out.extend_from_slice(&(t.epochs_done as u64).to_le_bytes());
                out.extend_from_slice(&t.adam.step.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r
            .take(4)
            .map_err(|_| format_error("file too short for the magic bytes"))?;
        if magic != MAGIC {
            return Err(format_error(format!(
                "bad magic bytes {magic:02x?}, expected {MAGIC:02x?} (\"TSGC\")"
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_error(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let json = r.bytes()?;
        let config: ModelConfig =
            serde_json::from_slice(json).map_err(|e| format_error(format!("bad model config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let kind = r.u8()?;
            let name = std::str::from_utf8(r.bytes()?)
                .map_err(|_| format_error("record name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| format_error("record too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            match kind {
                PARAM => {
                    params
                        .add_param(name, tensor)
                        .map_err(|e| format_error(e.to_string()))?;
                }
                BUFFER => {
                    params
                        .add_buffer(name, tensor)
                        .map_err(|e| format_error(e.to_string()))?;
                }
                MOMENT1 | MOMENT2 => {
                    let slot = if kind == MOMENT1 { &mut m } else { &mut v };
                    let expected = params.params().get(slot.len()).map(|p| p.name.as_str());
                    if expected != Some(name.as_str()) {
                        return Err(format_error(format!("moment record {name:?} out of order")));
                    }
                    slot.push(tensor);
                }
                k => return Err(format_error(format!("unknown record kind {k}"))),
            }
        }
        let training = match r.u8()? {
            0 => {
                if !m.is_empty() || !v.is_empty() {
                    return Err(format_error("moment records without training state"));
                }
                None
            }
            1 => {
                let epochs_done = r.u64()? as usize;
                let step = r.u64()?;
                Some(TrainingState {
                    epochs_done,
                    adam: AdamState { step, m, v },
                })
            }
            f => return Err(format_error(format!("bad training-state flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(format_error(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            params,
            training,
        })
    }

    /// Write atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::file(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_error(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests;
