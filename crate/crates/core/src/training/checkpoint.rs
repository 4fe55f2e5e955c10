//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! "DUA1"  u32 version
//! u64 len, config text (key=value lines)
//! u64 len, vocabulary text (token<TAB>id lines)
//! u32 count, then per parameter: u32 name len, name, u32 rank, u64 dims…, f64 values…
//! u64 epoch, f64 validation score, u32 len, metric name
//! u8 has_adam [u64 step, f64 lr, β₁, β₂, ε, then m and v values per parameter]
//! ```

use std::fs;
use std::path::Path;

use super::AdamState;
use crate::data::Vocabulary;
use crate::error::{DuaError, Result};
use crate::model::{init_params, Dua, DuaConfig};
use crate::numerics::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DUA1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub metric: String,
    pub validation_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DuaConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn model(&self) -> Dua {
        Dua {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_text(&mut w, &self.config.to_text());
        put_text(&mut w, &self.vocab.to_text());
        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            w.extend_from_slice(&(name.len() as u32).to_le_bytes());
            w.extend_from_slice(name.as_bytes());
            w.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut w, t.data());
        }
        w.extend_from_slice(&(self.meta.epoch as u64).to_le_bytes());
        w.extend_from_slice(&self.meta.validation_score.to_le_bytes());
        w.extend_from_slice(&(self.meta.metric.len() as u32).to_le_bytes());
        w.extend_from_slice(self.meta.metric.as_bytes());
        match &self.adam {
            None => w.push(0),
            Some(a) => {
                w.push(1);
                w.extend_from_slice(&a.step.to_le_bytes());
                for x in [a.lr, a.beta1, a.beta2, a.eps] {
                    w.extend_from_slice(&x.to_le_bytes());
                }
                for (name, _) in self.params.iter() {
                    put_values(&mut w, a.m[name].data());
                    put_values(&mut w, a.v[name].data());
                }
            }
        }
        w
    }

    /// Parses a checkpoint; every parameter must have the shape its config
    /// implies and no bytes may trail.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, not a DUA checkpoint"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.error_at(at, format!("unsupported format version {version}")));
        }
        let at = r.pos;
        let config = DuaConfig::from_text(&r.text64()?).map_err(|e| r.error_at(at, e.to_string()))?;
        let at = r.pos;
        let vocab = Vocabulary::from_text(&r.text64()?).map_err(|e| r.error_at(at, e.to_string()))?;
        if vocab.len() != config.vocab_size {
            return Err(r.error_at(
                at,
                format!("vocabulary has {} tokens, config says {}", vocab.len(), config.vocab_size),
            ));
        }

        let expected = init_params(&DuaConfig {
            init_scale: 0.0,
            ..config.clone()
        })
        .map_err(|e| r.error_at(at, e.to_string()))?;
        let at = r.pos;
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(r.error_at(at, format!("{count} parameters, expected {}", expected.len())));
        }
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.error_at(at, "parameter name is not UTF-8"))?;
            let want = expected
                .get(&name)
                .map_err(|_| r.error_at(at, format!("unexpected parameter `{name}`")))?;
            if params.contains(&name) {
                return Err(r.error_at(at, format!("duplicate parameter `{name}`")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            if shape != want.shape() {
                return Err(r.error_at(
                    at,
                    format!("`{name}` has shape {shape:?}, expected {:?}", want.shape()),
                ));
            }
            let data = r.values(want.len())?;
            params.insert(name, Tensor::new(shape, data).expect("shape checked"));
        }

        let epoch = r.u64()? as usize;
        let validation_score = r.f64()?;
        let at = r.pos;
        let len = r.u32()? as usize;
        let metric =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.error_at(at, "metric name is not UTF-8"))?;

        let at = r.pos;
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let mut state = AdamState::new(&params, lr);
                state.step = step;
                state.beta1 = beta1;
                state.beta2 = beta2;
                state.eps = eps;
                for (name, t) in params.iter() {
                    let m = r.values(t.len())?;
                    let v = r.values(t.len())?;
                    state.m.insert(name.to_string(), Tensor::new(t.shape().to_vec(), m).expect("shape"));
                    state.v.insert(name.to_string(), Tensor::new(t.shape().to_vec(), v).expect("shape"));
                }
                Some(state)
            }
            flag => return Err(r.error_at(at, format!("bad optimizer flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            vocab,
            params,
            adam,
            meta: CheckpointMeta {
                epoch,
                metric,
                validation_score,
            },
        })
    }
}

fn put_text(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u64).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_values(w: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, msg: impl Into<String>) -> DuaError {
        DuaError::Format {
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text64(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| self.error_at(at, "section length overflows"))?;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error_at(at, "section is not UTF-8"))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error_at(self.pos, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
