//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MIXPROCK"  u32 version  u32 config_len  config_json
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 rank  u64 dims[rank]  f64 data[..]
//! ```
//!
//! Values are stored as raw `f64` bits, so a round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIXPROCK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(params.config())?;
    write_len(&mut w, config.len())?;
    w.write_all(&config)?;
    write_len(&mut w, params.tensors().len())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        write_len(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        write_len(&mut w, t.shape().len())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::parse("not a mixpro checkpoint"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::parse(format!("unsupported checkpoint version {version}")));
    }
    let config_bytes = read_bytes(&mut r)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)?;
    let count = read_u32(&mut r)? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r)?).map_err(|e| Error::parse(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::parse(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|e| Error::parse(e.to_string()))?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::parse(format!("{name}: shape overflows")))?;
        let mut raw = vec![0u8; numel.checked_mul(8).ok_or_else(|| Error::parse("tensor too large"))?];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Parse(format!("{name}: {e}")))?);
        names.push(name);
    }
    let params = ModelParams::from_tensors(config, tensors)?;
    if let Some((want, got)) = params.names().iter().zip(&names).find(|(a, b)| a != b) {
        return Err(Error::parse(format!("tensor {got} found where {want} was expected")));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    read_checkpoint(std::fs::read(path)?.as_slice())
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::contract("length exceeds u32"))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::parse(format!("implausible field length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::init(&ModelConfig { layers: 1, ..ModelConfig::desk(12, 2) }, 7).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p.config(), q.config());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(read_checkpoint(&b"NOTACKPT...."[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&params(), &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut wrong_version = buf.clone();
        wrong_version[8] = 9;
        assert!(read_checkpoint(wrong_version.as_slice()).is_err());
    }
}
