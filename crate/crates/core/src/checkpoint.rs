//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CAPSCKPT"
//! version  u32
//! json_len u64, then UTF-8 JSON { "model": ModelConfig, "state": TrainState|null }
//! count    u32
//! count x { name_len u32, name, ndim u32, dims u64 x ndim, data f64 x numel }
//! ```
//!
//! Parameter tensors keep their store names; optimizer moments are stored as
//! `adam.m.<name>` and `adam.v.<name>`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::metrics::MetricsRecord;
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CAPSCKPT";
pub const VERSION: u32 = 1;

/// Progress needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub adam: AdamConfig,
    pub best_accuracy: f64,
    pub records: Vec<MetricsRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    state: Option<TrainState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: Option<TrainState>,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, opt: Option<&Adam<T>>, state: Option<TrainState>) -> Self {
        let mut tensors: Vec<(String, Tensor<f64>)> =
            model.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect();
        if let Some(opt) = opt {
            for (p, (m, v)) in model.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                tensors.push((format!("adam.m.{}", p.name), m.cast()));
                tensors.push((format!("adam.v.{}", p.name), v.cast()));
            }
        }
        Self {
            model: model.config.clone(),
            state,
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuild the network and copy every parameter in by name.
    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(self.model.clone(), 0)?;
        for p in model.params.iter_mut() {
            let t = self
                .tensor(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("`{}` stored as {:?}, model needs {:?}", p.name, t.shape(), p.value.shape()),
                ));
            }
            p.value = t.cast();
        }
        Ok(model)
    }

    /// Optimizer with restored moments, step and learning rate.
    pub fn to_optimizer<T: Real>(&self, model: &Model<T>) -> Result<Option<Adam<T>>> {
        let Some(state) = &self.state else { return Ok(None) };
        let mut opt = Adam::new(state.adam, &model.params)?;
        opt.step = state.step;
        opt.lr = state.lr;
        for (i, p) in model.params.iter().enumerate() {
            let (Some(m), Some(v)) = (
                self.tensor(&format!("adam.m.{}", p.name)),
                self.tensor(&format!("adam.v.{}", p.name)),
            ) else {
                return Ok(None);
            };
            opt.m[i] = m.cast();
            opt.v[i] = v.cast();
        }
        Ok(Some(opt))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let json = serde_json::to_vec(&Header {
            model: self.model.clone(),
            state: self.state.clone(),
        })?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, at: 0, path };
        if cur.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let json_len = cur.u64()? as usize;
        let header: Header = serde_json::from_slice(cur.take(json_len)?)?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let ndim = cur.u32()? as usize;
            let dims = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data = cur
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if cur.at != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self {
            model: header.model,
            state: header.state,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, &path.display().to_string())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.at)))?;
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
