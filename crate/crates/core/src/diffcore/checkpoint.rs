//! Binary checkpoint format.
//!
//! ```text
//! magic    4 bytes  "FTCK"
//! version  u32 LE
//! segments u32 LE
//! per segment: name length u32, UTF-8 name, rank u32, rank x u32 dims
//! count    u64 LE   total scalar count
//! values   count x f32 LE, in layout order
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{Layout, ParameterVector, Segment};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const VERSION: u32 = 1;

pub fn write_to<W: Write>(mut w: W, params: &ParameterVector) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let layout = params.layout();
    w.write_all(&(layout.segments().len() as u32).to_le_bytes())?;
    for s in layout.segments() {
        w.write_all(&(s.name.len() as u32).to_le_bytes())?;
        w.write_all(s.name.as_bytes())?;
        w.write_all(&(s.shape.len() as u32).to_le_bytes())?;
        for d in &s.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
    }
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 4);
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, what)?))
}

pub fn read_from<R: Read>(mut r: R) -> Result<ParameterVector> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let n_segments = read_u32(&mut r, "segment count")?;
    let mut segments = Vec::new();
    for _ in 0..n_segments {
        let len = read_u32(&mut r, "segment name length")? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated segment name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("segment name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "segment rank")?;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r, "segment shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        segments.push(Segment::new(name, &shape, 0));
    }
    let layout = Layout::new(segments);
    let count = u64::from_le_bytes(read_exact(&mut r, "value count")?) as usize;
    if count != layout.len() {
        return Err(Error::Checkpoint(format!(
            "value count {count} disagrees with layout size {}",
            layout.len()
        )));
    }
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Checkpoint("truncated parameter values".into()))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter values".into()));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ParameterVector::new(Arc::new(layout), values)
}

pub fn save(path: &Path, params: &ParameterVector) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_to(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterVector> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_from(std::io::BufReader::new(std::fs::File::open(path)?))
}
