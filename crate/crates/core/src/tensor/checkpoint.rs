//! Flat binary container of named f64 tensors.
//!
//! Layout: the 8-byte magic, then records until end of file, each
//! `name_len:u64 | name bytes | rank:u64 | dims:u64×rank | data:f64×numel`,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Bd3Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BD3CKPT1";

const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

pub fn encode_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a u64, or `None` at a clean end of file.
fn read_u64<R: Read>(r: &mut R, allow_eof: bool) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 && allow_eof {
                return Ok(None);
            }
            return Err(Bd3Error::Checkpoint("truncated record".into()));
        }
        filled += n;
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

fn need_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(read_u64(r, false)?.expect("eof disallowed"))
}

pub fn decode_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Bd3Error::Checkpoint("missing header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Bd3Error::Checkpoint("bad magic".into()));
    }
    let mut out = Vec::new();
    while let Some(name_len) = read_u64(&mut r, true)? {
        if name_len > MAX_NAME {
            return Err(Bd3Error::Checkpoint(format!("name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(|_| Bd3Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Bd3Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = need_u64(&mut r)?;
        if rank > MAX_RANK {
            return Err(Bd3Error::Checkpoint(format!("rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(need_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Bd3Error::Checkpoint(format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    encode_checkpoint(BufWriter::new(File::create(&tmp)?), tensors)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(BufReader::new(File::open(path)?))
}
