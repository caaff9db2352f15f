use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

use super::{ModelError, ModelSpec, TransformerModel};

/// Leading bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GKDCKPT1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: ModelSpec,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
}

/// Layout: magic, u64 LE manifest length, JSON manifest, then f32 LE arrays
/// in manifest order.
pub fn encode_checkpoint(model: &TransformerModel) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = model
        .names()
        .iter()
        .zip(model.tensors())
        .map(|(n, t)| {
            let e = Entry { name: n.clone(), shape: t.shape().to_vec(), offset };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { spec: model.spec().clone(), tensors }).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in model.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TransformerModel, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing GKDCKPT1 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(format!("manifest: {e}")))?;
    let data = &bytes[16 + len..];
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = data.get(start..start + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        named.push((e.name, Tensor::new(e.shape, vals)?));
    }
    TransformerModel::from_named(&manifest.spec, named)
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Checkpoint(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_checkpoint(model)).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Source(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_f32_exact() {
        let spec = ModelSpec::new("m", 8, 2, 2, 16, 8).unwrap();
        let model = TransformerModel::random(&spec, &mut Rng::new(1)).unwrap();
        let bytes = encode_checkpoint(&model);
        assert_eq!(&bytes[..8], b"GKDCKPT1");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.spec(), model.spec());
        for (a, b) in model.tensors().iter().zip(back.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(decode_checkpoint(b"NOTACKPT00000000").is_err());
        let spec = ModelSpec::new("m", 8, 1, 2, 16, 8).unwrap();
        let model = TransformerModel::random(&spec, &mut Rng::new(1)).unwrap();
        let bytes = encode_checkpoint(&model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/m.ckpt");
        let spec = ModelSpec::new("m", 8, 1, 2, 16, 8).unwrap();
        let model = TransformerModel::random(&spec, &mut Rng::new(1)).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.names(), model.names());
    }
}
