//! FPWT checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "FPWT" | version: u32 = 1 | count: u32
//! count × ( name_len: u16 | name: UTF-8 | rank: u8 | extents: rank × u32 | values: f64 × numel )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ParameterSet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"FPWT";
const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Format(format!("i/o: {e}"))
}

pub fn write_checkpoint<W: Write>(params: &ParameterSet, mut w: W) -> Result<()> {
    let count = u32::try_from(params.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        w.write_all(&len.to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&[rank]).map_err(io_err)?;
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent too large: {name}")))?;
            w.write_all(&e.to_le_bytes()).map_err(io_err)?;
        }
        let mut buf = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated while reading {what}: {e}")))?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterSet> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"FPWT\"")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "tensor count")?);
    let mut entries = Vec::with_capacity(count.min(4096) as usize);
    for i in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name of tensor {i}: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?;
        let [rank] = read_exact::<_, 1>(&mut r, "rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r, "extent")?) as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
        let mut raw = vec![0u8; numel.checked_mul(8).ok_or_else(|| Error::Format(format!("{name}: too large")))?];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated values of {name}: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    ParameterSet::new(entries).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint(params: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
