//! Named-tensor checkpoint container.
//!
//! Layout: the 8-byte magic `DDNNCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then the payload.
//! The payload holds every tensor as little-endian `f32`, in manifest order;
//! manifest offsets are relative to the payload start.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::ddnn::{Architecture, Ddnn};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DDNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Metadata key holding the serialized [`Architecture`].
pub const ARCHITECTURE_KEY: &str = "architecture";
/// Metadata key holding the input [`Normalization`] the weights were trained with.
pub const NORMALIZATION_KEY: &str = "normalization";

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

/// Tensors by name (stored as f32) plus string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, (DType, Tensor<f32>)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(metadata: BTreeMap<String, String>) -> Self {
        Checkpoint {
            tensors: BTreeMap::new(),
            metadata,
        }
    }

    /// Every parameter and buffer of `net`, with its architecture recorded.
    pub fn from_ddnn<T: Scalar>(net: &Ddnn<T>, mut metadata: BTreeMap<String, String>) -> Result<Self> {
        let arch = serde_json::to_string(&net.architecture())
            .map_err(|e| Error::Checkpoint(format!("cannot serialize architecture: {e}")))?;
        metadata.insert(ARCHITECTURE_KEY.to_string(), arch);
        let mut ckpt = Checkpoint::new(metadata);
        for (name, p) in net.named_params() {
            ckpt.tensors.insert(name, (T::DTYPE, p.value().cast()));
        }
        Ok(ckpt)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let text = self
            .metadata
            .get(ARCHITECTURE_KEY)
            .ok_or_else(|| Error::Checkpoint("checkpoint has no architecture record".into()))?;
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("bad architecture record: {e}")))
    }

    pub fn set_normalization(&mut self, norm: &Normalization) -> Result<()> {
        let text = serde_json::to_string(norm).map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.metadata.insert(NORMALIZATION_KEY.to_string(), text);
        Ok(())
    }

    pub fn normalization(&self) -> Result<Option<Normalization>> {
        self.metadata
            .get(NORMALIZATION_KEY)
            .map(|t| serde_json::from_str(t).map_err(|e| Error::Checkpoint(format!("bad normalization record: {e}"))))
            .transpose()
    }

    /// Rebuilds the network and loads every tensor into it. Missing, extra or
    /// mis-shaped tensors are errors.
    pub fn to_ddnn<T: Scalar>(&self) -> Result<Ddnn<T>> {
        let net = Ddnn::from_architecture(&self.architecture()?)?;
        let params = net.named_params();
        if params.len() != self.tensors.len() {
            let expected: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| !expected.contains(&k.as_str()))
                .collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, network has {} (unexpected: {extra:?})",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, p) in params {
            let (_, t) = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != p.shape().as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?}, network shape {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.set_value(t.cast());
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, (dtype, t)) in &self.tensors {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype.as_str().to_string(),
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: String| Error::Checkpoint(what);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let start = 20u64
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| corrupt(format!("manifest length {mlen} exceeds file size")))? as usize;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[20..start]).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
        if manifest.version != version {
            return Err(corrupt("manifest version disagrees with header".into()));
        }
        let payload = &bytes[start..];
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let dtype =
                DType::parse(&e.dtype).ok_or_else(|| corrupt(format!("{}: unknown dtype {}", e.name, e.dtype)))?;
            let numel = e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            if numel.and_then(|n| n.checked_mul(4)) != Some(e.length) {
                return Err(corrupt(format!(
                    "{}: length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .filter(|&end| end <= payload.len() as u64);
            let Some(end) = end else {
                return Err(corrupt(format!(
                    "{}: bytes {}..{} lie outside the {}-byte payload",
                    e.name,
                    e.offset,
                    e.offset.saturating_add(e.length),
                    payload.len()
                )));
            };
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            if tensors.insert(e.name.clone(), (dtype, t)).is_some() {
                return Err(corrupt(format!("duplicate tensor name {}", e.name)));
            }
        }
        Ok(Checkpoint {
            tensors,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// 64-bit FNV-1a, used to fingerprint resolved configurations.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddnn::{DdnnOptions, NetConfig, SubnetSpec};

    fn small() -> Ddnn<f32> {
        let mut cfg = NetConfig::resnet_cifar(&[2, 2, 2], 4);
        cfg.stage_channels = vec![4, 4, 8];
        cfg.input_shape = [3, 8, 8];
        Ddnn::build(cfg, vec![SubnetSpec::new(&[2, 1, 1])], &DdnnOptions::default()).unwrap()
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), "3".into());
        let ckpt = Checkpoint::from_ddnn(&small(), meta).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let net: Ddnn<f32> = back.to_ddnn().unwrap();
        assert_eq!(net.architecture(), small().architecture());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::from_ddnn(&small(), BTreeMap::new())
            .unwrap()
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
