//! "T3DC" binary tensor format.
//!
//! Layout (little-endian): magic `T3DC`, version `u8` = 1, rank `u8`,
//! dims as `u32` each, payload as `f32` row-major. Used for density
//! volumes, golden files and checkpoint entries.

use crate::tensor::Tensor;
use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 4] = b"T3DC";
pub const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum T3dcError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes (not a T3DC stream)")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("invalid tensor: {0}")]
    BadTensor(#[from] crate::tensor::TensorError),
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), T3dcError> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.rank() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, T3dcError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(T3dcError::BadMagic);
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(T3dcError::BadVersion(head[0]));
    }
    let rank = head[1] as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut buf4 = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        dims.push(u32::from_le_bytes(buf4) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf4)?;
        data.push(f32::from_le_bytes(buf4) as f64);
    }
    Ok(Tensor::new(dims, data)?)
}

pub fn save(path: &std::path::Path, t: &Tensor) -> Result<(), T3dcError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)
}

pub fn load(path: &std::path::Path) -> Result<Tensor, T3dcError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

/// Serialize to an in-memory byte vector (checkpoint container entries).
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    write_tensor(&mut out, t).expect("vec write cannot fail");
    out
}
