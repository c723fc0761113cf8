//! Checkpoint serialization.
//!
//! Layout (little-endian): magic `IVWMCKPT`, version u32, count u32, then per
//! parameter: name length u32 + UTF-8 name, rank u32, extents u64 each,
//! 32-bit float payload row-major.

use super::params::ParameterSet;
use super::Scalar;
use crate::error::{IvwmError, Result};
use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"IVWMCKPT";
const CKPT_VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar>(path: &Path, params: &ParameterSet<S>) -> Result<()> {
    let ps = path.display().to_string();
    let file = File::create(path).map_err(|e| IvwmError::io(&ps, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| IvwmError::io(&ps, e);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, value) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(value.ndim() as u32).to_le_bytes()).map_err(io)?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in value.iter() {
            w.write_all(&v.as_f32().to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Load a checkpoint into an existing parameter set. Every stored parameter
/// must exist with a matching shape; missing or mismatched entries error.
pub fn read_checkpoint<S: Scalar>(path: &Path, params: &mut ParameterSet<S>) -> Result<usize> {
    let ps = path.display().to_string();
    let file = File::open(path).map_err(|e| IvwmError::io(&ps, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| IvwmError::io(&ps, e))?;
    if &magic != CKPT_MAGIC {
        return Err(IvwmError::format(&ps, "bad magic"));
    }
    let version = read_u32(&mut r, &ps)?;
    if version != CKPT_VERSION {
        return Err(IvwmError::format(&ps, format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, &ps)?;
    let mut loaded = 0usize;
    for _ in 0..count {
        let name_len = read_u32(&mut r, &ps)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| IvwmError::io(&ps, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| IvwmError::format(&ps, "non-UTF-8 parameter name"))?;
        let rank = read_u32(&mut r, &ps)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| IvwmError::io(&ps, e))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|e| IvwmError::io(&ps, e))?;
            data.push(S::from_f32(f32::from_le_bytes(buf)));
        }
        let existing = params
            .get(&name)
            .ok_or_else(|| IvwmError::format(&ps, format!("unexpected parameter `{name}`")))?;
        if existing.shape() != shape.as_slice() {
            return Err(IvwmError::format(
                &ps,
                format!(
                    "shape mismatch for `{name}`: checkpoint {:?} vs model {:?}",
                    shape,
                    existing.shape()
                ),
            ));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap();
        *params.get_mut(&name).unwrap() = arr;
        loaded += 1;
    }
    if loaded != params.len() {
        return Err(IvwmError::format(
            &ps,
            format!("checkpoint has {loaded} parameters, model expects {}", params.len()),
        ));
    }
    Ok(loaded)
}

fn read_u32<R: Read>(r: &mut R, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| IvwmError::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

/// Plain-text `key=value` sidecar for architecture configs.
pub fn write_sidecar(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let ps = path.display().to_string();
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| IvwmError::io(&ps, e))
}

pub fn read_sidecar(path: &Path) -> Result<Vec<(String, String)>> {
    let ps = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| IvwmError::io(&ps, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| IvwmError::format(&ps, format!("line {}: missing `=`", lineno + 1)))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}
