//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "SPKGCKPT"  version u32
//! d_in u32  classes u32  epoch u64  best_val_f1 f64
//! config: u32 length + UTF-8 key = value text
//! parameter count u32, then per parameter:
//!     name (u32 length + UTF-8)  ndim u32  dims u64 x ndim  values f64 x numel
//! optimizer step u64, moment flag u8; if set, first then second moments
//!     per parameter as values f64 x numel in parameter order
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::optim::AdamState;
use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"SPKGCKPT";
pub const VERSION: u32 = 1;
const MAX_DIMS: usize = 8;
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub d_in: usize,
    pub classes: usize,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
    pub best_val_f1: f64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn capture(model: &ModelParams, config: &TrainConfig, adam: &AdamState, best_val_f1: f64, epoch: usize) -> Self {
        Self {
            config: config.clone(),
            d_in: model.dims.d_in,
            classes: model.dims.classes,
            params: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: adam.clone(),
            best_val_f1,
            epoch,
        }
    }

    /// Rebuilds the model described by this checkpoint.
    pub fn model(&self) -> Result<ModelParams> {
        let dims = self.config.model_dims(self.d_in, self.classes)?;
        let mut model = ModelParams::new(dims, &mut ChaCha8Rng::seed_from_u64(0))?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters, the configured model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            model
                .store
                .set(id, t.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.d_in as u32);
        put_u32(&mut out, self.classes as u32);
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.best_val_f1.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut out, name);
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut out, t.data());
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        let moments = !self.adam.m.is_empty();
        out.push(moments as u8);
        if moments {
            for t in self.adam.m.iter().chain(&self.adam.v) {
                put_values(&mut out, t.data());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let d_in = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let epoch = r.u64()? as usize;
        let best_val_f1 = f64::from_le_bytes(r.array()?);
        let config = TrainConfig::from_text(&r.string()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > MAX_DIMS {
                return Err(Error::Checkpoint(format!("{name}: {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= MAX_ELEMENTS)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: oversized shape {shape:?}")))?;
            let data = r.values(numel)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let step = r.u64()?;
        let moments = match r.take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(Error::Checkpoint(format!("bad moment flag {f}"))),
        };
        let mut adam = AdamState {
            step,
            m: Vec::new(),
            v: Vec::new(),
        };
        if moments {
            for half in 0..2 {
                for (_, p) in &params {
                    let t = Tensor::new(p.shape().to_vec(), r.values(p.numel())?)?;
                    if half == 0 {
                        adam.m.push(t);
                    } else {
                        adam.v.push(t);
                    }
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            d_in,
            classes,
            params,
            adam,
            best_val_f1,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_values(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}
