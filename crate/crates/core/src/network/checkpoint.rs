//! Binary checkpoint container.
//!
//! Layout: 4-byte magic `RSCK`, little-endian `u32` format version,
//! little-endian `u64` header length, a JSON header, then every tensor's
//! `f32` values little-endian in header order (weight then bias per layer).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ConvParams, Model, NetworkConfig, Weights};

const MAGIC: &[u8; 4] = b"RSCK";
pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_GROUP: &str = "weights";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    layer: String,
    weight_shape: [usize; 4],
    bias_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    tensors: Vec<TensorEntry>,
    state: serde_json::Value,
}

/// Network config plus named parameter groups (`weights`, optimizer
/// buffers, ...) and free-form JSON state.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub network: NetworkConfig,
    pub groups: BTreeMap<String, Weights>,
    pub state: serde_json::Value,
}

impl CheckpointFile {
    pub fn from_model(model: &Model) -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(WEIGHTS_GROUP.to_string(), model.weights.clone());
        Self { network: model.config.clone(), groups, state: serde_json::Value::Null }
    }

    pub fn weights(&self) -> Result<&Weights> {
        self.groups.get(WEIGHTS_GROUP).ok_or_else(|| Error::Checkpoint("checkpoint has no weights group".into()))
    }

    pub fn into_model(mut self) -> Result<Model> {
        let weights = self
            .groups
            .remove(WEIGHTS_GROUP)
            .ok_or_else(|| Error::Checkpoint("checkpoint has no weights group".into()))?;
        Model::new(self.network, weights)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (group, w) in &self.groups {
            for (layer, p) in w.iter() {
                let (a, b, c, d) = p.weight.dim();
                tensors.push(TensorEntry {
                    group: group.clone(),
                    layer: layer.clone(),
                    weight_shape: [a, b, c, d],
                    bias_len: p.bias.len(),
                });
            }
        }
        let header = Header { network: self.network.clone(), tensors, state: self.state.clone() };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            out.write_all(MAGIC)?;
            out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
            out.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
            out.write_all(&header_bytes)?;
            for w in self.groups.values() {
                for (_, p) in w.iter() {
                    for v in p.weight.iter().chain(p.bias.iter()) {
                        out.write_f32::<LittleEndian>(*v)?;
                    }
                }
            }
            out.flush()?;
            out.get_ref().sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut input = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = input.read_u64::<LittleEndian>()? as usize;
        let mut header_bytes = vec![0u8; len];
        input.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut groups: BTreeMap<String, BTreeMap<String, ConvParams>> = BTreeMap::new();
        for t in &header.tensors {
            let [a, b, c, d] = t.weight_shape;
            let mut read_vec = |n: usize| -> Result<Vec<f32>> {
                let mut v = vec![0.0f32; n];
                input.read_f32_into::<LittleEndian>(&mut v)?;
                Ok(v)
            };
            let weight = Array4::from_shape_vec((a, b, c, d), read_vec(a * b * c * d)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let bias = Array1::from(read_vec(t.bias_len)?);
            groups.entry(t.group.clone()).or_default().insert(t.layer.clone(), ConvParams { weight, bias });
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            network: header.network,
            groups: groups.into_iter().map(|(k, v)| (k, Weights::from_layers(v))).collect(),
            state: header.state,
        })
    }
}

/// Loads a model, rejecting checkpoints whose config differs from `expected`.
pub fn load_model(path: &Path, expected: Option<&NetworkConfig>) -> Result<Model> {
    let ckpt = CheckpointFile::read(path)?;
    if let Some(cfg) = expected {
        if *cfg != ckpt.network {
            return Err(Error::Checkpoint(format!(
                "network config mismatch: checkpoint has {:?}, expected {:?}",
                ckpt.network, cfg
            )));
        }
    }
    ckpt.into_model()
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    CheckpointFile::from_model(model).write(path)
}
