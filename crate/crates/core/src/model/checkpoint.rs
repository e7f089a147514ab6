//! On-disk weight container.
//!
//! Little-endian layout:
//! ```text
//! magic     8 bytes  "RSTYCKPT"
//! version   u32      currently 1
//! cfg_len   u32      length of the config JSON block
//! cfg       bytes    serde_json of UNetConfig
//! n_records u32
//! record*   u16 name_len, name bytes (utf-8),
//!           u8 ndim, ndim × u32 dims,
//!           u64 byte_len, byte_len bytes of f32 data
//! ```
//! Round-trips are bit-exact: the f32 payload is copied verbatim.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::params::ParamStore;
use crate::model::unet::{UNetConfig, UNetWeights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RSTYCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, weights: &UNetWeights) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(weights.config())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(weights.params().len() as u32).to_le_bytes())?;
    for (name, tensor) in weights.params().iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!(
                "parameter name too long: {name}"
            )));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("too many dimensions for {name}")));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let data = tensor.data();
        w.write_all(&((data.len() * 4) as u64).to_le_bytes())?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<UNetWeights> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(
            "not a weight checkpoint (bad magic)".into(),
        ));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = read_u32(&mut r, "config length")? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg_bytes, "config block")?;
    let config: UNetConfig = serde_json::from_slice(&cfg_bytes)?;

    let n = read_u32(&mut r, "record count")? as usize;
    let mut params = ParamStore::new();
    for i in 0..n {
        let mut nl = [0u8; 2];
        read_exact(&mut r, &mut nl, "name length")?;
        let name_len = u16::from_le_bytes(nl) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("record {i}: name is not utf-8")))?;
        let mut nd = [0u8; 1];
        read_exact(&mut r, &mut nd, "rank")?;
        let mut shape = Vec::with_capacity(nd[0] as usize);
        for _ in 0..nd[0] {
            shape.push(read_u32(&mut r, "dimension")? as usize);
        }
        let mut bl = [0u8; 8];
        read_exact(&mut r, &mut bl, "data length")?;
        let byte_len = u64::from_le_bytes(bl) as usize;
        let expected: usize = shape.iter().product::<usize>() * 4;
        if byte_len != expected {
            return Err(Error::Checkpoint(format!(
                "record {name}: {byte_len} data bytes for shape {shape:?} (expected {expected})"
            )));
        }
        let mut raw = vec![0u8; byte_len];
        read_exact(&mut r, &mut raw, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        // Bit-exactness over validation: stored weights may legitimately
        // contain values a fresh construction would reject only if training
        // diverged, and save refuses non-finite tensors implicitly (they
        // never form). Shape consistency is still enforced.
        params.add(&name, Tensor::from_raw(shape, data))?;
    }
    UNetWeights::from_parts(config, params)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint while reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
