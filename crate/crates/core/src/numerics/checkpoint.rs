//! Binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LATT"            4 bytes magic
//! version           u32 (currently 1)
//! entry count       u32
//! per entry:
//!   name length     u16
//!   name            UTF-8 bytes
//!   rank            u8
//!   extents         rank × u64
//!   payload         product(extents) × f64, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"LATT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| Error::Checkpoint("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint("rank > 255".into()))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let [rank] = read_exact::<_, 1>(&mut r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated payload for {name}: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, entries)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
