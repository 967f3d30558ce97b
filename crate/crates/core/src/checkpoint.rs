//! Binary checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"DANUBECK"
//! 8       4     format version, u32 LE (currently 1)
//! 12      8     header length H, u64 LE
//! 20      H     header, UTF-8 JSON (see `Header`)
//! 20+H    P     payload: tensors back to back, little-endian, row-major
//! 20+H+P  32    SHA-256 of every preceding byte
//! ```
//!
//! Tensor offsets in the header are relative to the start of the payload.
//! Optimizer moments are stored as ordinary tensors named `optim.m.<param>`
//! and `optim.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::pretrain::OptimizerState;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DANUBECK";
pub const VERSION: u32 = 1;
const PREFIX: usize = 20;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimCounters {
    pub step: u64,
    pub tokens_seen: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimCounters>,
    /// Free-form metadata (for example the adapter config).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors of one dtype plus the model config.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub optimizer: Option<OptimCounters>,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_model(model: &Model<S>, optimizer: Option<&OptimizerState<S>>) -> Self {
        let names = model.params.names();
        let mut tensors: Vec<(String, Tensor<S>)> = names
            .iter()
            .cloned()
            .zip(model.params.tensors().into_iter().cloned())
            .collect();
        let optimizer = optimizer.map(|st| {
            for (kind, moments) in [("m", &st.m), ("v", &st.v)] {
                tensors.extend(
                    names
                        .iter()
                        .zip(moments)
                        .map(|(n, t)| (format!("optim.{kind}.{n}"), t.clone())),
                );
            }
            OptimCounters {
                step: st.step,
                tokens_seen: st.tokens_seen,
            }
        });
        Self {
            config: model.config.clone(),
            optimizer,
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take_named(&self, names: &[String]) -> Result<Vec<Tensor<S>>> {
        names
            .iter()
            .map(|n| {
                self.get(n)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {n} missing")))
            })
            .collect()
    }

    pub fn model(&self) -> Result<Model<S>> {
        self.config.validate()?;
        let names: Vec<String> = crate::model::param_shapes(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let params = ModelParams::from_tensors(&self.config, self.take_named(&names)?)?;
        Model::new(self.config.clone(), params)
    }

    pub fn optimizer_state(&self) -> Result<Option<OptimizerState<S>>> {
        let Some(c) = self.optimizer else {
            return Ok(None);
        };
        let names: Vec<String> = crate::model::param_shapes(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let prefixed = |k: &str| {
            names
                .iter()
                .map(|n| format!("optim.{k}.{n}"))
                .collect::<Vec<_>>()
        };
        Ok(Some(OptimizerState {
            m: self.take_named(&prefixed("m"))?,
            v: self.take_named(&prefixed("v"))?,
            step: c.step,
            tokens_seen: c.tokens_seen,
        }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            t.data().iter().for_each(|&x| x.write_le(&mut payload));
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: S::DTYPE,
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            config: self.config.clone(),
            optimizer: self.optimizer,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split(bytes)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != S::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is {:?}, expected {:?}",
                    e.name,
                    e.dtype,
                    S::DTYPE
                )));
            }
            let numel: usize = e.shape.iter().product();
            let size = S::DTYPE.size();
            let (start, len) = (e.offset as usize, e.nbytes as usize);
            if len != numel * size || start.checked_add(len).is_none_or(|end| end > payload.len()) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has an inconsistent extent",
                    e.name
                )));
            }
            let data = payload[start..start + len]
                .chunks_exact(size)
                .map(S::read_le)
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self {
            config: header.config,
            optimizer: header.optimizer,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Verifies framing and checksum; returns the header and the payload.
fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREFIX + DIGEST || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint (bad magic or truncated)".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let body = bytes.len() - DIGEST;
    if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if PREFIX.checked_add(hlen).is_none_or(|end| end > body) {
        return Err(Error::Checkpoint("header length exceeds file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX..PREFIX + hlen])?;
    Ok((header, &bytes[PREFIX + hlen..body]))
}

/// Header of a checkpoint on disk, after checksum verification.
pub fn read_header(path: &Path) -> Result<Header> {
    Ok(split(&std::fs::read(path)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let model = Model::<f64>::init(ModelConfig::tiny(16), 1).unwrap();
        let mut st = OptimizerState::new(model.params.tensors());
        st.m[0].data_mut()[3] = -0.0;
        st.v[1].data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        st.step = 7;
        st.tokens_seen = 1234;
        let mut ck = Checkpoint::from_model(&model, Some(&st));
        ck.meta
            .insert("stage".into(), serde_json::json!("pretrain"));
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((n1, a), (n2, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let st = back.optimizer_state().unwrap().unwrap();
        assert_eq!((st.step, st.tokens_seen), (7, 1234));
        assert_eq!(back.model().unwrap().params, ck.model().unwrap().params);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::<f64>::from_bytes(b"DANUBECK").is_err());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
    }
}
