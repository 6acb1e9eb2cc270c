//! Binary checkpoint: `S3R1` magic, version, header length (u32 LE each), a
//! JSON header, then every tensor as little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, OptimizerState, Tensor};
use crate::scenegen::io::{read_file, write_file};

pub const MAGIC: &[u8; 4] = b"S3R1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainingHeader {
    step: u64,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    settings: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    training: Option<TrainingHeader>,
}

/// Optimizer and schedule state needed to resume training exactly.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub step: u64,
    pub optimizer: OptimizerState<f32>,
    /// Opaque snapshot of the trainer's settings.
    pub settings: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), &p.value))
            .collect();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        if let Some(t) = &self.training {
            for (i, n) in names.iter().enumerate() {
                named.push((format!("adamw.m.{n}"), &t.optimizer.first_moment[i]));
            }
            for (i, n) in names.iter().enumerate() {
                named.push((format!("adamw.v.{n}"), &t.optimizer.second_moment[i]));
            }
        }
        let mut tensors = Vec::with_capacity(named.len());
        let mut payload = Vec::new();
        for (name, t) in &named {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        let header = Header {
            config: self.config().clone(),
            tensors,
            payload_bytes: payload.len(),
            training: self.training.as_ref().map(|t| TrainingHeader {
                step: t.step,
                optimizer: t.optimizer.config,
                optimizer_step: t.optimizer.step,
                settings: t.settings.clone(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format(path, r);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("bad checkpoint magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let version = u32_at(4);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32_at(8) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad(format!("truncated header: {hlen} bytes declared")))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[12 + hlen..];
        if payload.len() != header.payload_bytes {
            return Err(bad(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        header.config.validate()?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let chunk = e
                .offset
                .checked_add(n * 4)
                .and_then(|end| payload.get(e.offset..end))
                .ok_or_else(|| bad(format!("tensor {} exceeds payload", e.name)))?;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        let n_params = ParamStore::init(&header.config, 0)?.len();
        let expected = if header.training.is_some() { 3 * n_params } else { n_params };
        if tensors.len() != expected {
            return Err(Error::Consistency(format!(
                "checkpoint holds {} tensors, config needs {expected}",
                tensors.len()
            )));
        }
        let mut rest = tensors.split_off(n_params);
        let params = ParamStore::from_named(&header.config, tensors)?;
        let training = match header.training {
            None => None,
            Some(t) => {
                let second = rest.split_off(n_params);
                let check = |v: Vec<(String, Tensor<f32>)>, tag: &str| -> Result<Vec<Tensor<f32>>> {
                    v.into_iter()
                        .zip(params.iter())
                        .map(|((name, tensor), (pname, p))| {
                            if name != format!("adamw.{tag}.{pname}") || tensor.shape() != p.value.shape() {
                                return Err(Error::Consistency(format!("optimizer slot {name} does not match {pname}")));
                            }
                            Ok(tensor)
                        })
                        .collect()
                };
                Some(TrainingState {
                    step: t.step,
                    optimizer: OptimizerState {
                        config: t.optimizer,
                        step: t.optimizer_step,
                        first_moment: check(rest, "m")?,
                        second_moment: check(second, "v")?,
                    },
                    settings: t.settings,
                })
            }
        };
        Ok(Checkpoint { params, training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_file(path)?)
    }
}
