//! Minimal RIFF/WAVE reader and writer: mono 16-bit little-endian PCM.
//!
//! Samples map to [-1, 1] as `s / 32768`; writing quantizes with rounding,
//! so a round trip is exact to within one quantization step (1/32768).

use std::path::Path;

use crate::error::{AffectError, Result};

fn le16(v: u16) -> [u8; 2] {
    v.to_le_bytes()
}

fn le32(v: u32) -> [u8; 4] {
    v.to_le_bytes()
}

/// Serialize samples (clamped to [-1, 1]) as a mono PCM16 WAVE file.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + samples.len() * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&le32(36 + data_len));
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&le32(16)); // PCM fmt chunk size
    bytes.extend_from_slice(&le16(1)); // PCM
    bytes.extend_from_slice(&le16(1)); // mono
    bytes.extend_from_slice(&le32(sample_rate));
    bytes.extend_from_slice(&le32(sample_rate * 2)); // byte rate
    bytes.extend_from_slice(&le16(2)); // block align
    bytes.extend_from_slice(&le16(16)); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&le32(data_len));
    for &s in samples {
        let clamped = s.clamp(-1.0, 1.0);
        let q = (clamped * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    super::atomic_write(path, &bytes)
}

/// Read a mono PCM16 WAVE file; returns (samples in [-1, 1], sample rate).
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path)?;
    let err = |offset: u64, detail: &str| AffectError::Parse {
        file: name.clone(),
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(err(0, "not a RIFF/WAVE file"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(err(pos as u64, "chunk overruns file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(err(pos as u64, "fmt chunk too small"));
                }
                let format = u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap());
                let channels = u16::from_le_bytes(bytes[body + 2..body + 4].try_into().unwrap());
                let rate = u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap());
                let bits = u16::from_le_bytes(bytes[body + 14..body + 16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        pos = body + size + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| err(12, "missing fmt chunk"))?;
    if format != 1 || channels != 1 || bits != 16 {
        return Err(err(
            12,
            "unsupported encoding: need mono 16-bit PCM",
        ));
    }
    let (body, size) = data.ok_or_else(|| err(12, "missing data chunk"))?;
    let mut samples = Vec::with_capacity(size / 2);
    for i in (0..size).step_by(2) {
        let q = i16::from_le_bytes(bytes[body + i..body + i + 2].try_into().unwrap());
        samples.push(q as f64 / 32768.0);
    }
    Ok((samples, rate))
}
