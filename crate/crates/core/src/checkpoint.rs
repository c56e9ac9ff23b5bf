//! Checkpoint container: a little-endian `u64` header length, a JSON
//! header (config, tensor manifest, progress counters), then every tensor
//! as raw little-endian `f32` in manifest (key-sorted) order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "optim.momentum.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Param,
    Buffer,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    key: String,
    kind: Kind,
    shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: serde_json::Value,
    tensors: Vec<Entry>,
    epoch: usize,
    step: usize,
    seed: u64,
    extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration.
    pub config: serde_json::Value,
    pub store: ParamStore<f32>,
    /// SGD momentum buffers keyed by parameter name.
    pub momentum: BTreeMap<String, Tensor<f32>>,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    /// Task-specific metadata (e.g. fine-tuning head layout).
    pub extra: serde_json::Value,
}

impl Checkpoint {
    fn entries(&self) -> Vec<(Entry, &Tensor<f32>)> {
        let mut all: Vec<(Entry, &Tensor<f32>)> = Vec::new();
        for (k, t) in &self.store.params {
            all.push((Entry { key: k.clone(), kind: Kind::Param, shape: t.shape() }, t));
        }
        for (k, t) in &self.store.buffers {
            all.push((Entry { key: k.clone(), kind: Kind::Buffer, shape: t.shape() }, t));
        }
        for (k, t) in &self.momentum {
            all.push((Entry { key: format!("{MOMENTUM_PREFIX}{k}"), kind: Kind::Momentum, shape: t.shape() }, t));
        }
        all.sort_by(|a, b| a.0.key.cmp(&b.0.key));
        all
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = self.entries();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: entries.iter().map(|e| e.0.clone()).collect(),
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = entries.iter().map(|e| e.1.len()).sum();
        let mut out = Vec::with_capacity(8 + json.len() + 4 * total);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        if bytes.len() < 8 {
            return Err(fmt("checkpoint shorter than its length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(8..8usize.saturating_add(hlen)).ok_or_else(|| fmt(format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| fmt(format!("checkpoint header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(fmt(format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", header.format_version)));
        }
        let mut pos = 8 + hlen;
        let mut store = ParamStore::new();
        let mut momentum = BTreeMap::new();
        let mut prev: Option<&str> = None;
        for e in &header.tensors {
            if prev.is_some_and(|p| p >= e.key.as_str()) {
                return Err(fmt(format!("manifest not key-sorted at {}", e.key)));
            }
            prev = Some(&e.key);
            let n: usize = e.shape.iter().product();
            let end = pos + 4 * n;
            let raw = bytes.get(pos..end).ok_or_else(|| fmt(format!("blob for {} truncated", e.key)))?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let t = Tensor::from_vec(e.shape, data)?;
            pos = end;
            match e.kind {
                Kind::Param => store.insert(e.key.clone(), t),
                Kind::Buffer => store.insert_buffer(e.key.clone(), t),
                Kind::Momentum => {
                    let k = e.key.strip_prefix(MOMENTUM_PREFIX).ok_or_else(|| fmt(format!("momentum key {}", e.key)))?;
                    momentum.insert(k.to_string(), t);
                }
            }
        }
        if pos != bytes.len() {
            return Err(fmt(format!("{} trailing bytes after last tensor", bytes.len() - pos)));
        }
        Ok(Self { config: header.config, store, momentum, epoch: header.epoch, step: header.step, seed: header.seed, extra: header.extra })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.insert("b.weight", Tensor::from_vec([2, 1, 1, 1, 1], vec![1.5, -0.0]).unwrap());
        store.insert("a.weight", Tensor::from_vec([1, 1, 1, 1, 3], vec![f32::MIN_POSITIVE, 3.25, -7.0]).unwrap());
        store.insert_buffer("b.running_var", Tensor::full([2, 1, 1, 1, 1], 0.75));
        let mut momentum = BTreeMap::new();
        momentum.insert("a.weight".to_string(), Tensor::from_vec([1, 1, 1, 1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        Checkpoint {
            config: serde_json::json!({"seed": 3}),
            store,
            momentum,
            epoch: 2,
            step: 17,
            seed: 3,
            extra: serde_json::Value::Null,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn rejects_version_and_truncation() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..4]), Err(Error::Format(_))));
        let text = String::from_utf8_lossy(&bytes[8..]).replace("\"format_version\":1", "\"format_version\":9");
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut forged = bytes[..8].to_vec();
        forged.extend_from_slice(&text.as_bytes()[..hlen]);
        forged.extend_from_slice(&bytes[8 + hlen..]);
        assert!(matches!(Checkpoint::from_bytes(&forged), Err(Error::Format(m)) if m.contains("version")));
    }
}
