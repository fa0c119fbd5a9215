//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 0..4         | magic `PCIR`                                        |
//! | 4..8         | format version (`u32`)                              |
//! | 8..16        | manifest length `n` (`u64`)                         |
//! | 16..16+n     | JSON [`Manifest`]                                   |
//! | …            | zero padding; each tensor payload starts on a       |
//! |              | 64-byte boundary at its recorded absolute `offset`  |
//! |              | and the file ends with the last payload             |
//!
//! Payloads are raw `f32` values in row-major order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkConfig;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PCIR";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;
const HEADER: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("checkpoint does not match the model:\n{0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Training progress recorded with the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StageInfo {
    pub stage: u8,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub training: StageInfo,
    /// Model parameters.
    pub tensors: Vec<TensorEntry>,
    /// Auxiliary state (optimizer moments), keyed like `tensors`.
    #[serde(default)]
    pub extra: Vec<TensorEntry>,
    /// Free-form scalar metadata (e.g. optimizer step count).
    #[serde(default)]
    pub meta: BTreeMap<String, f64>,
}

/// Named `f32` tensor held by a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        StoredTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f32().expect("finite")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub training: StageInfo,
    pub params: Vec<StoredTensor>,
    pub extra: Vec<StoredTensor>,
    pub meta: BTreeMap<String, f64>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(config: &NetworkConfig, training: StageInfo, params: &ParamStore<T>) -> Self {
        Checkpoint {
            config: config.clone(),
            training,
            params: params.iter().map(|(n, t)| StoredTensor::from_tensor(n, t)).collect(),
            extra: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    /// Serialises to bytes. The output is a pure function of the contents.
    pub fn to_bytes(&self) -> Vec<u8> {
        // Offsets depend on the manifest length, which depends on the offsets'
        // digits; iterate until the layout is stable.
        let mut data_start = align(HEADER + 256);
        loop {
            let (manifest, total) = self.manifest(data_start);
            let json = serde_json::to_vec(&manifest).expect("manifest serialises");
            let needed = align(HEADER + json.len());
            if needed > data_start {
                data_start = needed;
                continue;
            }
            let mut out = Vec::with_capacity(total);
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
            for (entry, t) in manifest.tensors.iter().chain(&manifest.extra).zip(self.params.iter().chain(&self.extra)) {
                out.resize(entry.offset as usize, 0);
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out.resize(total, 0);
            return out;
        }
    }

    fn manifest(&self, data_start: usize) -> (Manifest, usize) {
        let mut offset = data_start;
        let mut end = data_start;
        let mut entry = |t: &StoredTensor| {
            let start = align(offset);
            end = start + 4 * t.data.len();
            offset = end;
            TensorEntry { name: t.name.clone(), dtype: "f32".into(), shape: t.shape.clone(), offset: start as u64 }
        };
        let tensors = self.params.iter().map(&mut entry).collect();
        let extra = self.extra.iter().map(&mut entry).collect();
        let m = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            training: self.training,
            tensors,
            extra,
            meta: self.meta.clone(),
        };
        (m, end)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < HEADER {
            return Err(corrupt("file shorter than the header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(HEADER..HEADER.saturating_add(len)).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
        let end = manifest
            .tensors
            .iter()
            .chain(&manifest.extra)
            .map(|e| e.offset as usize + 4 * e.shape.iter().product::<usize>())
            .max()
            .unwrap_or(bytes.len());
        if bytes.len() != end {
            return Err(CheckpointError::Corrupt(format!("expected {end} bytes, found {}", bytes.len())));
        }
        let read = |e: &TensorEntry| -> Result<StoredTensor, CheckpointError> {
            if e.dtype != "f32" {
                return Err(CheckpointError::Corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = start
                .checked_add(4 * n)
                .and_then(|end| bytes.get(start..end))
                .ok_or_else(|| CheckpointError::Corrupt(format!("{}: payload truncated", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Ok(StoredTensor { name: e.name.clone(), shape: e.shape.clone(), data })
        };
        Ok(Checkpoint {
            params: manifest.tensors.iter().map(read).collect::<Result<_, _>>()?,
            extra: manifest.extra.iter().map(read).collect::<Result<_, _>>()?,
            config: manifest.config,
            training: manifest.training,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored weights into a store with the same names and shapes,
    /// or reports every missing, unexpected and mis-shaped tensor.
    pub fn load_into<T: Scalar>(&self, template: &ParamStore<T>) -> Result<ParamStore<T>, CheckpointError> {
        let stored: BTreeMap<&str, &StoredTensor> = self.params.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut problems = Vec::new();
        for (name, t) in template.iter() {
            match stored.get(name) {
                None => problems.push(format!("  missing from checkpoint: {name} {:?}", t.shape())),
                Some(s) if s.shape != t.shape() => {
                    problems.push(format!("  shape mismatch: {name} model {:?} vs checkpoint {:?}", t.shape(), s.shape))
                }
                Some(_) => {}
            }
        }
        for s in &self.params {
            if template.find(&s.name).is_none() {
                problems.push(format!("  unexpected in checkpoint: {} {:?}", s.name, s.shape));
            }
        }
        if !problems.is_empty() {
            return Err(CheckpointError::Mismatch(problems.join("\n")));
        }
        let tensors = template
            .iter()
            .map(|(name, t)| {
                let data = stored[name].data.iter().map(|&v| T::lit(v as f64)).collect();
                Tensor::from_vec(t.shape(), data)
                    .map(|x| x.requires_grad_(t.requires_grad()))
                    .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        template.with_tensors(tensors).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::PromptCir;

    fn sample() -> Checkpoint {
        let (_, ps) = PromptCir::build::<f32>(&NetworkConfig::micro(), 3).unwrap();
        let mut c = Checkpoint::from_params(&NetworkConfig::micro(), StageInfo { stage: 1, iteration: 42 }, &ps);
        c.extra.push(StoredTensor { name: "adam.m.x".into(), shape: vec![2], data: vec![0.5, -1.0] });
        c.meta.insert("adam_step".into(), 42.0);
        c
    }

    #[test]
    fn roundtrip_and_layout() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"PCIR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let m: Manifest = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert!(m.tensors.iter().chain(&m.extra).all(|e| e.offset % 64 == 0));
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn truncation_and_magic_detected() {
        let bytes = sample().to_bytes();
        for cut in [3, 15, 40, bytes.len() - 5] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Corrupt(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Corrupt(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn mismatched_model_lists_names() {
        let c = sample();
        let other = NetworkConfig { use_dpm: false, ..NetworkConfig::micro() };
        let (_, ps) = PromptCir::build::<f32>(&other, 0).unwrap();
        let err = c.load_into(&ps).unwrap_err().to_string();
        assert!(err.contains("missing from checkpoint: prompt_level1.generator.prompts"), "{err}");
        assert!(err.contains("unexpected in checkpoint: prompt_level1.generator.bases"), "{err}");
    }
}
