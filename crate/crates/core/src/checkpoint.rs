//! Binary container for named `f32` arrays plus a JSON manifest.
//!
//! Layout: 8 magic bytes, the manifest length as a little-endian `u64`, the
//! manifest as UTF-8 JSON, then every array's values as little-endian `f32`
//! in manifest order. The manifest records a CRC32 of the payload.

use crate::autodiff::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"STGANCK\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { found: String, expected: String },
    #[error("missing array {0}")]
    MissingArray(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    /// Config, optimizer, stage, iteration and rng state; free-form per kind.
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingArray(name.into()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                found: self.kind.clone(),
                expected: kind.into(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, t) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
            crc32: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::CorruptCheckpoint(m.into());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize.checked_add(len).filter(|e| *e <= bytes.len()).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end]).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let payload = &bytes[end..];
        if crc32fast::hash(payload) != manifest.crc32 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        let mut cursor = 0;
        for e in &manifest.arrays {
            let n: usize = e.shape.iter().product();
            if e.offset != cursor || e.offset + 4 * n > payload.len() {
                return Err(corrupt(&format!("array {} out of bounds", e.name)));
            }
            let data = payload[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| corrupt(&err.to_string()))?;
            arrays.push((e.name.clone(), t));
            cursor += 4 * n;
        }
        if cursor != payload.len() {
            return Err(corrupt("trailing payload bytes"));
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
        let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("stgan", serde_json::json!({"stage": 1, "lr": 1e-4}));
        c.push("a", &Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5));
        c.push("b", &Tensor::new(&[1], vec![f32::MIN_POSITIVE]).unwrap());
        c
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn flipped_magic_is_corrupt() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::CorruptCheckpoint(_))));
    }

    #[test]
    fn flipped_payload_is_corrupt() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut m: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        m["format_version"] = serde_json::json!(99);
        let json = serde_json::to_vec(&m).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(
            Checkpoint::from_bytes(&out),
            Err(CheckpointError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
