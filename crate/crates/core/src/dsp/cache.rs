//! Per-clip feature cache files.
//!
//! Layout (little-endian): 8-byte magic `SNTGFEAT`, `u32` frames, `u32`
//! bands, `u64` front-end config hash, `f64` frame rate, then
//! `frames × bands` row-major `f32` values.

use std::path::Path;

use super::Spectrogram;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SNTGFEAT";
const HEADER: usize = 8 + 4 + 4 + 8 + 8;

pub fn write_feature_cache(path: impl AsRef<Path>, spec: &Spectrogram) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(HEADER + spec.values().len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(spec.frames() as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.bands() as u32).to_le_bytes());
    bytes.extend_from_slice(&spec.config_hash.to_le_bytes());
    bytes.extend_from_slice(&spec.frame_rate.to_le_bytes());
    for v in spec.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a cache file; fails if it was written under a different front-end
/// configuration than `expected_hash`.
pub fn read_feature_cache(path: impl AsRef<Path>, expected_hash: u64) -> Result<Spectrogram> {
    let path = path.as_ref();
    let bad = |reason: String| Error::FeatureCache {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(bad("missing header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let frames = u32_at(8);
    let bands = u32_at(12);
    let hash = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let frame_rate = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    if hash != expected_hash {
        return Err(bad(format!("config hash {hash:016x}, expected {expected_hash:016x}")));
    }
    let body = &bytes[HEADER..];
    if body.len() != frames * bands * 4 {
        return Err(bad(format!("body holds {} bytes, header says {frames}×{bands}", body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Spectrogram::new(values, frames, bands, frame_rate, hash)
}
