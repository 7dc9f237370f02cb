//! Binary sample file plus JSON manifest sidecar.
//!
//! Layout: `PEEG`, u32 version, u32 sample count, u32 time steps, u32
//! channels, then per sample u64 id, u8 votes and `time_steps * channels`
//! f32 values (time-major), then a CRC32 over the sample records. All
//! integers and reals are little-endian.

use std::path::{Path, PathBuf};

use super::{Dataset, DatasetManifest, EEGSample, NUM_ANNOTATORS};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"PEEG";
pub const DATASET_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_samples(samples: &[EEGSample], time_steps: usize, channels: usize) -> Result<Vec<u8>> {
    let len = time_steps * channels;
    let mut buf = Vec::with_capacity(HEADER_LEN + samples.len() * (9 + 4 * len) + 4);
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_FORMAT_VERSION, samples.len() as u32, time_steps as u32, channels as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        if s.values.len() != len {
            return Err(Error::Dimension(format!(
                "sample {} has {} values, expected {len}",
                s.sample_id,
                s.values.len()
            )));
        }
        buf.extend_from_slice(&s.sample_id.to_le_bytes());
        buf.push(s.votes);
        for v in &s.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[HEADER_LEN..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Decodes a sample file into (samples, time_steps, channels).
pub fn decode_samples(bytes: &[u8]) -> Result<(Vec<EEGSample>, usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::format("magic", "not a dataset file"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("header", "file truncated"));
    }
    let version = le_u32(bytes, 4);
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {DATASET_FORMAT_VERSION}"),
        ));
    }
    let count = le_u32(bytes, 8) as usize;
    let time_steps = le_u32(bytes, 12) as usize;
    let channels = le_u32(bytes, 16) as usize;
    if time_steps == 0 || channels == 0 {
        return Err(Error::format("header", "zero window extent"));
    }
    let len = time_steps * channels;
    let record = 9 + 4 * len;
    let expected = count
        .checked_mul(record)
        .and_then(|n| n.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| Error::format("sample_count", "implausibly large"))?;
    if bytes.len() < expected {
        return Err(Error::format("payload", format!("file truncated: {} of {expected} bytes", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::format("payload", "unexpected trailing bytes"));
    }
    let payload = &bytes[HEADER_LEN..expected - 4];
    let stored_crc = le_u32(bytes, expected - 4);
    if crc32fast::hash(payload) != stored_crc {
        return Err(Error::format("crc32", "checksum mismatch"));
    }
    let mut samples = Vec::with_capacity(count);
    for rec in payload.chunks_exact(record) {
        let sample_id = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let votes = rec[8];
        if votes as usize > NUM_ANNOTATORS {
            return Err(Error::format("votes", format!("sample {sample_id} has {votes} votes")));
        }
        let values: Vec<f32> = rec[9..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("values", format!("sample {sample_id} has non-finite values")));
        }
        samples.push(EEGSample {
            sample_id,
            votes,
            values,
        });
    }
    Ok((samples, time_steps, channels))
}

/// Sidecar path: `data.peeg` → `data.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let m = &dataset.manifest;
    let bytes = encode_samples(&dataset.samples, m.time_steps, m.channel_count)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    std::fs::write(manifest_path(path), serde_json::to_vec_pretty(m)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (samples, time_steps, channels) = decode_samples(&std::fs::read(path)?)?;
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(manifest_path(path))?)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.time_steps != time_steps || manifest.channel_count != channels {
        return Err(Error::format("manifest", "window shape disagrees with the sample file"));
    }
    let dataset = Dataset { manifest, samples };
    dataset.validate()?;
    Ok(dataset)
}
