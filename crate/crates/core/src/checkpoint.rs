//! Binary checkpoints.
//!
//! Layout (little endian): magic `MSTG`, `u32` version, `u32` byte length and
//! UTF-8 config text (including a `step = N` line), then tensor records until
//! end of file. A record is a `u32` name length, the name bytes, a `u32` rank,
//! `rank` `u64` extents and the `f64` values. Adam moments are stored under
//! `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::MstGnn;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const MAGIC: &[u8; 4] = b"MSTG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    /// Empty when the optimizer state was not saved.
    pub adam_m: Vec<(String, Tensor)>,
    pub adam_v: Vec<(String, Tensor)>,
}

fn named(model: &MstGnn, values: impl Fn(usize) -> Tensor) -> Vec<(String, Tensor)> {
    model
        .store()
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), values(i)))
        .collect()
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let model = &t.model;
        Checkpoint {
            config: RunConfig {
                model: model.config().clone(),
                train: t.config.clone(),
            },
            step: t.adam.step,
            params: named(model, |i| model.store().params()[i].value.clone()),
            adam_m: named(model, |i| t.adam.m[i].clone()),
            adam_v: named(model, |i| t.adam.v[i].clone()),
        }
    }

    pub fn from_model(model: &MstGnn, config: RunConfig) -> Self {
        Checkpoint {
            config,
            step: 0,
            params: named(model, |i| model.store().params()[i].value.clone()),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        }
    }

    pub fn to_model(&self) -> Result<MstGnn> {
        MstGnn::from_values(self.config.model.clone(), &self.params)
    }

    /// Restores model, optimizer moments and step counter.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let model = self.to_model()?;
        let mut t = Trainer::new(model, self.config.train.clone())?;
        if !self.adam_m.is_empty() {
            let mut adam = Adam::new(AdamConfig::from(&self.config.train), t.model.store());
            for (moments, stored) in [(&mut adam.m, &self.adam_m), (&mut adam.v, &self.adam_v)] {
                if stored.len() != moments.len() {
                    return Err(Error::Checkpoint(
                        "optimizer state does not match parameters".into(),
                    ));
                }
                for (slot, (name, value)) in moments.iter_mut().zip(stored) {
                    if slot.shape() != value.shape() {
                        return Err(Error::Checkpoint(format!(
                            "moment shape mismatch for {name}"
                        )));
                    }
                    *slot = value.clone();
                }
            }
            adam.step = self.step;
            t.adam = adam;
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = format!("{}step = {}\n", self.config.to_text(), self.step);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let records = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .chain(self.adam_m.iter().map(|(n, t)| (format!("adam.m/{n}"), t)))
            .chain(self.adam_v.iter().map(|(n, t)| (format!("adam.v/{n}"), t)));
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let mut step = 0;
        let mut config_text = String::new();
        for line in text.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.trim() == "step" => {
                    step = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad step `{}`", v.trim())))?
                }
                _ => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
            }
        }
        let config = RunConfig::from_text(&config_text)?;
        let (mut params, mut adam_m, mut adam_v) = (Vec::new(), Vec::new(), Vec::new());
        while r.pos < bytes.len() {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = r
                .take(
                    count
                        .checked_mul(8)
                        .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
                )?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if let Some(rest) = name.strip_prefix("adam.m/") {
                adam_m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                adam_v.push((rest.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        Ok(Checkpoint {
            config,
            step,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Context {
            context: path.display().to_string(),
            inner: Box::new(e.into()),
        })?;
        Self::from_bytes(&bytes)
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

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
