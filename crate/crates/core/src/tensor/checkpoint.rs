//! Binary parameter checkpoints with a JSON sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RFTFCKPT"            8 bytes
//! version               u32
//! segment count         u32
//! per segment:          name_len u32, name utf-8, offset u64, ndim u32, dims u64 * ndim
//! value count           u64
//! values                f64 * value count
//! ```
//!
//! The sidecar `<file>.json` records the network spec, seed and training step.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MlpSpec, ParamVector, Segment};
use crate::error::{Result, RftfError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFTFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"policy"` or `"value"`.
    pub kind: String,
    pub spec: MlpSpec,
    pub seed: u64,
    pub step: u64,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn encode_params(params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layout().len() as u32).to_le_bytes());
    for seg in params.layout() {
        out.extend_from_slice(&(seg.name.len() as u32).to_le_bytes());
        out.extend_from_slice(seg.name.as_bytes());
        out.extend_from_slice(&(seg.offset as u64).to_le_bytes());
        out.extend_from_slice(&(seg.shape.len() as u32).to_le_bytes());
        for d in &seg.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(RftfError::Format(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamVector> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(RftfError::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(RftfError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n_segments = r.u32()? as usize;
    let mut layout = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| RftfError::Format(format!("segment name is not utf-8: {e}")))?
            .to_string();
        let offset = r.u64()? as usize;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        layout.push(Segment {
            name,
            offset,
            shape,
        });
    }
    let count = r.u64()? as usize;
    let payload = r.take(count.checked_mul(8).ok_or_else(|| {
        RftfError::Format("checkpoint value count overflows".into())
    })?)?;
    if r.pos != bytes.len() {
        return Err(RftfError::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParamVector::from_parts(layout, values)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_checkpoint(path: &Path, params: &ParamVector, meta: &CheckpointMeta) -> Result<()> {
    meta.spec.check_params(params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RftfError::io(dir, e))?;
    }
    fs::write(path, encode_params(params)).map_err(|e| RftfError::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
    fs::write(&side, json).map_err(|e| RftfError::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamVector, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| RftfError::io(path, e))?;
    let params = decode_params(&bytes)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| RftfError::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| RftfError::Format(format!("{}: {e}", side.display())))?;
    meta.spec.validate()?;
    meta.spec.check_params(&params)?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Activation;

    #[test]
    fn header_is_bit_exact() {
        let spec = MlpSpec::new(1, vec![], 1, Activation::Tanh).unwrap();
        let bytes = encode_params(&spec.zeros());
        assert_eq!(&bytes[..8], b"RFTFCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        // first segment: "head.weight"
        assert_eq!(&bytes[16..20], &11u32.to_le_bytes());
        assert_eq!(&bytes[20..31], b"head.weight");
    }

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/net.ckpt");
        let spec = MlpSpec::new(3, vec![4], 2, Activation::Tanh).unwrap();
        let params = spec.xavier_init(&mut ChaCha8Rng::seed_from_u64(3));
        let meta = CheckpointMeta {
            kind: "policy".into(),
            spec: spec.clone(),
            seed: 3,
            step: 17,
            extra: Default::default(),
        };
        save_checkpoint(&path, &params, &meta).unwrap();
        assert!(sidecar_path(&path).exists());
        let (p2, m2) = load_checkpoint(&path).unwrap();
        assert_eq!(p2, params);
        assert_eq!(m2, meta);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let spec = MlpSpec::new(2, vec![], 1, Activation::Tanh).unwrap();
        let mut bytes = encode_params(&spec.zeros());
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode_params(&bytes).is_err());
        bytes[0] = b'X';
        assert!(decode_params(&bytes).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ckpt"));
    }
}
