//! Checkpoint files.
//!
//! Layout: magic `DBGCKPT1`, format version (`u32` LE), manifest length
//! (`u64` LE), a JSON manifest with the model configuration and one entry
//! per tensor (name, dtype, shape), then the raw little-endian tensor data
//! in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, LayerId, ModelConfig, ModelParameters};
use crate::tensor::{Precision, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DBGCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Precision,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    /// Epochs completed when the checkpoint was written.
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Real>(params: &ModelParameters<T>, epoch: Option<usize>) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        config: *params.config(),
        epoch,
        tensors: params
            .named_tensors()
            .map(|(name, t)| TensorEntry {
                name,
                dtype: T::PRECISION,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + params.num_parameters() * T::PRECISION.bytes());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    Ok(out)
}

fn read_values<S: Real, T: Real>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::PRECISION.bytes())
        .map(|ch| T::lit(S::from_le_chunk(ch).as_f64()))
        .collect()
}

/// Parses a checkpoint, converting to precision `T` if it was stored in the other one.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(ModelParameters<T>, CheckpointManifest)> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (missing magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json_end = 20usize
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[20..json_end])?;

    let expected: Vec<(String, Vec<usize>)> = LayerId::ALL
        .iter()
        .flat_map(|&id| {
            let (shape, _) = id.weight_shape(&manifest.config);
            let bias = vec![*shape.last().expect("non-empty shape")];
            [(format!("{}.weight", id.name()), shape), (format!("{}.bias", id.name()), bias)]
        })
        .collect();
    if manifest.tensors.len() != expected.len() {
        return Err(bad(format!("{} tensors, expected {}", manifest.tensors.len(), expected.len())));
    }

    let mut cursor = json_end;
    let mut tensors = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(bad(format!("entry {} {:?} where {name} {shape:?} was expected", entry.name, entry.shape)));
        }
        let count: usize = shape.iter().product();
        let width = entry.dtype.bytes();
        let end = cursor + count * width;
        if end > bytes.len() {
            return Err(bad(format!("data of {name} is truncated")));
        }
        let chunk = &bytes[cursor..end];
        let data = match entry.dtype {
            Precision::F32 => read_values::<f32, T>(chunk),
            Precision::F64 => read_values::<f64, T>(chunk),
        };
        let t = Tensor::from_vec(shape, data)?;
        t.ensure_finite("checkpoint")?;
        tensors.push(t);
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    let mut it = tensors.into_iter();
    let layers = (0..LayerId::ALL.len())
        .map(|_| Layer {
            weight: it.next().expect("counted above"),
            bias: it.next().expect("counted above"),
        })
        .collect();
    Ok((ModelParameters::from_layers(manifest.config, layers)?, manifest))
}

pub fn save<T: Real>(path: &Path, params: &ModelParameters<T>, epoch: Option<usize>) -> Result<()> {
    fs::write(path, to_bytes(params, epoch)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(ModelParameters<T>, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DbgModel, HiddenWidths};
    use crate::pfg::SamplingConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            length: 6,
            widths: HiddenWidths {
                dsb_hidden: 5,
                dsb_out: 4,
                acr_hidden: 6,
                tbc_collapse: 7,
                tbc_hidden: 5,
            },
            sampling: SamplingConfig::new(2, 4, 2),
            seed: 9,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let p = ModelParameters::<f32>::init(cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &p, Some(3)).unwrap();
        let (q, m) = load::<f32>(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(m.epoch, Some(3));
        let x = Tensor::from_fn(&[6, 3], |k| (k as f32 * 0.3).cos());
        let a = DbgModel::new(p).unwrap().forward(&x, &x).unwrap();
        let b = DbgModel::new(q).unwrap().forward(&x, &x).unwrap();
        assert_eq!(a.completeness, b.completeness);
        assert_eq!(a.start, b.start);
    }

    #[test]
    fn precision_conversion() {
        let p = ModelParameters::<f32>::init(cfg()).unwrap();
        let (q, _) = from_bytes::<f64>(&to_bytes(&p, None).unwrap()).unwrap();
        assert_eq!(q.cast::<f32>(), p);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = ModelParameters::<f64>::init(cfg()).unwrap();
        let bytes = to_bytes(&p, None).unwrap();
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<f64>(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(from_bytes::<f64>(&magic).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(from_bytes::<f64>(&version).is_err());
    }
}
