//! Flat binary tensor container, the unit of every checkpoint file.
//!
//! Layout: magic `TNSR`, version u32, rank u32, dims as u64, then the data
//! as 64-bit reals. All integers and reals little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AffectError, Result};

use super::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R, name: &str) -> Result<Tensor> {
    let parse_err = |offset: u64, detail: &str| AffectError::Parse {
        file: name.to_string(),
        offset,
        detail: detail.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| parse_err(0, "missing magic bytes"))?;
    if &magic != MAGIC {
        return Err(parse_err(0, "bad magic, expected TNSR"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| parse_err(4, "missing version"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(parse_err(4, "unsupported version"));
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| parse_err(8, "missing rank"))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(parse_err(8, "implausible rank"));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for i in 0..rank {
        r.read_exact(&mut u64buf)
            .map_err(|_| parse_err(12 + 8 * i as u64, "missing dimension"))?;
        dims.push(u64::from_le_bytes(u64buf) as usize);
    }
    let n: usize = dims.iter().product();
    let header = 12 + 8 * rank as u64;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        r.read_exact(&mut u64buf)
            .map_err(|_| parse_err(header + 8 * i as u64, "truncated data"))?;
        data.push(f64::from_le_bytes(u64buf));
    }
    Tensor::new(dims, data)
}

pub fn write_tensor_file(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * (tensor.rank() + tensor.numel()));
    write_tensor(&mut buf, tensor)?;
    crate::io::atomic_write(path, &buf)
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    read_tensor(&mut bytes.as_slice(), &path.display().to_string())
}
