//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "SEMIDGCK"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen     JSON: config, seed, method, [{name, shape, offset, len}]
//! payload          float32 LE values of every array, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metaloop::TrainConfig;
use crate::networks::{Model, ModelConfig, ParamValues};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEMIDGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub method: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub source_domains: Vec<usize>,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    method: String,
    model: ModelConfig,
    train: TrainConfig,
    seed: u64,
    source_domains: Vec<usize>,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    /// Snapshots parameters at float32 precision.
    pub fn from_params(
        model: &Model,
        params: &ParamValues,
        train: &TrainConfig,
        method: &str,
        source_domains: &[usize],
    ) -> Self {
        let specs = model.specs();
        let arrays = specs
            .iter()
            .zip(params.iter())
            .map(|(spec, t)| NamedArray {
                name: spec.name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            method: method.to_owned(),
            model: model.config.clone(),
            train: train.clone(),
            seed: train.seed,
            source_domains: source_domains.to_vec(),
            arrays,
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(self.model.clone())
    }

    /// Parameters as `f64`, checked against the architecture.
    pub fn params(&self, model: &Model) -> Result<ParamValues> {
        let specs = model.specs();
        if specs.len() != self.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} arrays, checkpoint {}",
                specs.len(),
                self.arrays.len()
            )));
        }
        for (spec, a) in specs.iter().zip(&self.arrays) {
            if spec.name != a.name || spec.shape != a.shape {
                return Err(Error::Checkpoint(format!(
                    "array {} {:?} does not match expected {} {:?}",
                    a.name, a.shape, spec.name, spec.shape
                )));
            }
        }
        Ok(specs.regroup(
            self.arrays.iter().map(|a| Tensor::new(a.shape.clone(), a.data.iter().map(|&v| v as f64).collect())),
        ))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let e = ArrayEntry { name: a.name.clone(), shape: a.shape.clone(), offset, len: a.data.len() };
                offset += a.data.len();
                e
            })
            .collect();
        let header = Header {
            method: self.method.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
            source_domains: self.source_domains.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Checkpoint(format!("array {} length does not match its shape", e.name)));
            }
            let (start, end) = (e.offset * 4, (e.offset + e.len) * 4);
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("array {} runs past the end of the payload", e.name)));
            }
            let data = payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.push(NamedArray { name: e.name, shape: e.shape, data });
        }
        Ok(Self {
            method: header.method,
            model: header.model,
            train: header.train,
            seed: header.seed,
            source_domains: header.source_domains,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
