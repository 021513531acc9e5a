//! Flat binary checkpoint for [`PolicyParams`].
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "SHRDPOL\0"
//! version      u32      (currently 1)
//! d_model      u32
//! n_heads      u32
//! ff_dim       u32
//! history      u32
//! heads        u32      number of action heads
//! per head:    u32 size, then `size` mask bytes (0 or 1)
//! tensors      u32
//! per tensor:  u32 name length, name (utf-8), u32 rank, rank x u64 dims,
//!              prod(dims) x f64 values in row-major order
//! ```

use std::io::{Read, Write};

use super::{NetConfig, PolicyParams};
use crate::error::PolicyError;

pub const MAGIC: &[u8; 8] = b"SHRDPOL\0";
pub const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> PolicyError {
    PolicyError::Checkpoint(e.to_string())
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<(), PolicyError> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_len<W: Write>(w: &mut W, v: usize) -> Result<(), PolicyError> {
    let v = u32::try_from(v).map_err(|_| PolicyError::Checkpoint(format!("{v} does not fit in u32")))?;
    put_u32(w, v)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32, PolicyError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64, PolicyError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write<W: Write>(params: &PolicyParams, w: &mut W) -> Result<(), PolicyError> {
    w.write_all(MAGIC).map_err(io_err)?;
    put_u32(w, VERSION)?;
    let c = params.config;
    for v in [c.d_model, c.n_heads, c.ff_dim, c.history, params.masks.len()] {
        put_len(w, v)?;
    }
    for mask in &params.masks {
        put_len(w, mask.len())?;
        let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        w.write_all(&bytes).map_err(io_err)?;
    }
    let tensors = params.tensors();
    put_len(w, tensors.len())?;
    for (name, shape, values) in tensors {
        put_len(w, name.len())?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        put_len(w, shape.len())?;
        for d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn read<R: Read>(r: &mut R) -> Result<PolicyParams, PolicyError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(PolicyError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(PolicyError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut header = [0usize; 5];
    for h in &mut header {
        *h = get_u32(r)? as usize;
    }
    let [d_model, n_heads, ff_dim, history, heads] = header;
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(PolicyError::Checkpoint(format!("d_model {d_model} not divisible by n_heads {n_heads}")));
    }
    let mut masks = Vec::with_capacity(heads);
    for _ in 0..heads {
        let n = get_u32(r)? as usize;
        let mut bytes = vec![0u8; n];
        r.read_exact(&mut bytes).map_err(io_err)?;
        masks.push(bytes.into_iter().map(|b| b != 0).collect());
    }
    let mut params = PolicyParams::zeros(NetConfig { d_model, n_heads, ff_dim, history }, masks);
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let count = get_u32(r)? as usize;
    if count != expected.len() {
        return Err(PolicyError::Checkpoint(format!("expected {} tensors, found {count}", expected.len())));
    }
    for ((want_name, want_shape), slot) in expected.iter().zip(params.tensors_mut()) {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if &name != want_name {
            return Err(PolicyError::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        let rank = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u64(r)? as usize);
        }
        if &shape != want_shape {
            return Err(PolicyError::Checkpoint(format!("{name}: shape {shape:?}, expected {want_shape:?}")));
        }
        for v in slot.iter_mut() {
            *v = f64::from_bits(get_u64(r)?);
        }
    }
    Ok(params)
}
