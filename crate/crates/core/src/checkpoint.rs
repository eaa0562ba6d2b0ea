//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DTNCKPT\0`, a little-endian `u32` version, a
//! `u64` header length, a JSON header (config, step count, tensor names and
//! shapes), then every tensor's row-major `f64` payload in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DtnError, Result};
use crate::model::{NetConfig, Network};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DTNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    steps: usize,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub steps: usize,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_network(net: &mut Network, steps: usize) -> Self {
        Self {
            config: net.config().clone(),
            steps,
            tensors: net.named_tensors(),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(self.config.clone(), 0)?;
        net.load_tensors(&self.tensors)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            steps: self.steps,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| DtnError::Checkpoint(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| DtnError::Checkpoint(msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let mut rest = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            if rest.len() < n * 8 {
                return Err(bad(format!("truncated payload for {name}")));
            }
            let data = rest[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[n * 8..];
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            config: header.config,
            steps: header.steps,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| DtnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DtnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Names the first field where `found` differs from `expected`.
pub fn config_mismatch(expected: &NetConfig, found: &NetConfig) -> Option<String> {
    let a = serde_json::to_value(expected).expect("serializable");
    let b = serde_json::to_value(found).expect("serializable");
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter().find(|(k, v)| b.get(*k) != Some(v)).map(|(k, v)| {
        format!(
            "{k}: expected {v}, checkpoint has {}",
            b.get(k).unwrap_or(&serde_json::Value::Null)
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn bit_exact_round_trip() {
        let mut net = Network::new(NetConfig::desk(ModelKind::Dtn, 16, 16), 9).unwrap();
        let ck = Checkpoint::from_network(&mut net, 3);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.steps, 3);
        assert_eq!(back.config, ck.config);
        for ((na, a), (nb, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let mut restored = Checkpoint::load(&p).unwrap().to_network().unwrap();
        assert_eq!(restored.named_tensors(), net.named_tensors());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut net = Network::new(NetConfig::desk(ModelKind::Unet, 16, 16), 1).unwrap();
        let bytes = Checkpoint::from_network(&mut net, 0).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(DtnError::Checkpoint(_))
        ));
        assert!(matches!(
            Checkpoint::load("/nonexistent/x.ckpt"),
            Err(DtnError::Io { .. })
        ));
    }

    #[test]
    fn mismatch_names_field() {
        let a = NetConfig::desk(ModelKind::Dtn, 32, 32);
        let mut b = a.clone();
        assert_eq!(config_mismatch(&a, &b), None);
        b.height = 64;
        assert!(config_mismatch(&a, &b).unwrap().starts_with("height"));
    }
}
