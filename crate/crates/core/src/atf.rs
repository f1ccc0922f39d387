//! The "ATF1" binary tensor file format: magic bytes `ATF1`, u8 rank,
//! rank little-endian u32 extents, then the values as little-endian f32,
//! row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ATF1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::BadFormat("rank exceeds u8".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[t.rank() as u8])?;
    for &e in t.shape() {
        if e > u32::MAX as usize {
            return Err(Error::BadFormat("extent exceeds u32".into()));
        }
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadFormat(format!("bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut b4 = [0u8; 4];
    for _ in 0..rank[0] {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Tensor::new(shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    write_tensor(&mut buf, t)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut cur = std::io::Cursor::new(bytes);
    read_tensor(&mut cur)
}
