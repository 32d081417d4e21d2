//! File formats: WAVE audio, the raw frame container, and small CSV
//! helpers. Everything is written atomically (temp file + rename) so a
//! crashed run never leaves a half-written artifact behind.

mod frames;
mod wav;

pub use frames::{read_frames, write_frames, FrameSet};
pub use wav::{read_wav, write_wav};

use std::path::Path;

use crate::error::Result;

/// Write `bytes` to `path` via a temporary sibling file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write a CSV file atomically. `header` names every column; each row must
/// have the same arity.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Format a real for CSV output: shortest representation that round-trips.
pub fn fmt_f64(v: f64) -> String {
    let mut s = format!("{}", v);
    if s.parse::<f64>() != Ok(v) {
        s = format!("{:?}", v);
    }
    s
}
