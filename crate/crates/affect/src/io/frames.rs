//! Raw binary frame container ("FRMS"): a codec-free store for RGB video.
//!
//! Header: magic `FRMS`, version u32, frame count u32, height u32, width
//! u32, channels u32 (all little-endian), followed by frames as 8-bit RGB,
//! row-major. The loader converts to reals in [0, 1].

use std::path::Path;

use crate::error::{AffectError, Result};

const MAGIC: &[u8; 4] = b"FRMS";
const VERSION: u32 = 1;

/// An in-memory stack of equally sized 8-bit RGB frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// frame-major, then row-major within a frame
    pub pixels: Vec<u8>,
}

impl FrameSet {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        FrameSet {
            height,
            width,
            channels,
            pixels: Vec::new(),
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        if self.frame_len() == 0 {
            0
        } else {
            self.pixels.len() / self.frame_len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push_frame(&mut self, frame: &[u8]) -> Result<()> {
        if frame.len() != self.frame_len() {
            return Err(AffectError::dim(format!(
                "push_frame: expected {} bytes, got {}",
                self.frame_len(),
                frame.len()
            )));
        }
        self.pixels.extend_from_slice(frame);
        Ok(())
    }

    pub fn frame_bytes(&self, idx: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[idx * n..(idx + 1) * n]
    }

    /// Frame `idx` as channel-major reals in [0, 1]: `[c x h x w]`.
    pub fn frame_real(&self, idx: usize) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let src = self.frame_bytes(idx);
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = src[(y * w + x) * c + ch] as f64 / 255.0;
                }
            }
        }
        out
    }
}

pub fn write_frames(path: &Path, frames: &FrameSet) -> Result<()> {
    let mut bytes = Vec::with_capacity(24 + frames.pixels.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(frames.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(frames.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(frames.channels as u32).to_le_bytes());
    bytes.extend_from_slice(&frames.pixels);
    super::atomic_write(path, &bytes)
}

pub fn read_frames(path: &Path) -> Result<FrameSet> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path)?;
    let err = |offset: u64, detail: &str| AffectError::Parse {
        file: name.clone(),
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 24 {
        return Err(err(0, "header truncated"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err(0, "bad magic, expected FRMS"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(err(4, "unsupported version"));
    }
    let count = u32_at(8) as usize;
    let height = u32_at(12) as usize;
    let width = u32_at(16) as usize;
    let channels = u32_at(20) as usize;
    let expected = count * height * width * channels;
    if bytes.len() != 24 + expected {
        return Err(err(24, "pixel payload length mismatch"));
    }
    Ok(FrameSet {
        height,
        width,
        channels,
        pixels: bytes[24..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_exact() {
        let dir = std::env::temp_dir().join("affect_frms_test");
        let path = dir.join("v.frms");
        let mut set = FrameSet::new(4, 3, 3);
        for f in 0..5u8 {
            let frame: Vec<u8> = (0..36).map(|i| i as u8 ^ f).collect();
            set.push_frame(&frame).unwrap();
        }
        write_frames(&path, &set).unwrap();
        let back = read_frames(&path).unwrap();
        assert_eq!(back, set);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn frame_real_is_channel_major_unit_range() {
        let mut set = FrameSet::new(1, 2, 3);
        set.push_frame(&[255, 0, 0, 0, 255, 0]).unwrap();
        let real = set.frame_real(0);
        // red channel plane, then green, then blue
        assert_eq!(real, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn length_mismatch_is_parse_error() {
        let dir = std::env::temp_dir().join("affect_frms_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.frms");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FRMS");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes()); // claims 2 frames
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]); // only one frame worth
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_frames(&path),
            Err(AffectError::Parse { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
