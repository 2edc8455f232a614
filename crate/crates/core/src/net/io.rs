//! Model file: `BLMF` magic, `u32` version, `u32` header length, a JSON
//! header naming each tensor and its byte offset, then the BLTN records.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{LayerParams, NetError, Network, NetworkConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BLMF";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    /// Byte offset of the record from the start of the record section.
    offset: u64,
    length: u64,
}

impl Network {
    pub fn write_model<W: Write>(&self, mut w: W) -> Result<(), NetError> {
        let mut records = Vec::new();
        let mut tensors = Vec::new();
        for (k, params) in self.params.iter().enumerate() {
            let Some(p) = params else { continue };
            for (suffix, t) in [("weight", &p.weight), ("bias", &p.bias)] {
                let bytes = t.to_bytes();
                tensors.push(TensorEntry {
                    name: format!("layers.{k}.{suffix}"),
                    offset: records.len() as u64,
                    length: bytes.len() as u64,
                });
                records.extend_from_slice(&bytes);
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors,
        })
        .map_err(|e| NetError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&records)?;
        Ok(())
    }

    pub fn read_model<R: Read>(mut r: R) -> Result<Self, NetError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NetError::Format("not a model file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if u32::from_le_bytes(word) != VERSION {
            return Err(NetError::Format("unsupported model file version".into()));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| NetError::Format(e.to_string()))?;
        let mut records = Vec::new();
        r.read_to_end(&mut records)?;

        let mut net = Network::zeros(header.config)?;
        for k in 0..net.params.len() {
            if net.params[k].is_none() {
                continue;
            }
            let load = |suffix: &str| -> Result<Tensor, NetError> {
                let name = format!("layers.{k}.{suffix}");
                let entry = header
                    .tensors
                    .iter()
                    .find(|e| e.name == name)
                    .ok_or_else(|| NetError::Format(format!("missing tensor {name}")))?;
                let start = entry.offset as usize;
                let end = start
                    .checked_add(entry.length as usize)
                    .filter(|&e| e <= records.len())
                    .ok_or_else(|| NetError::Format(format!("tensor {name} out of bounds")))?;
                Ok(Tensor::read_from(&records[start..end])?)
            };
            let params = LayerParams {
                weight: load("weight")?,
                bias: load("bias")?,
            };
            net.set_params(k, params)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NetError> {
        let mut bytes = Vec::new();
        self.write_model(&mut bytes)?;
        crate::io::write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NetError> {
        Self::read_model(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
