//! `BTMD` checkpoints.
//!
//! Layout (little-endian): magic `BTMD`, version `u32`, config block length
//! `u32` followed by `key=value` lines, tensor count `u32`, then per tensor:
//! name length `u32`, name bytes, rank `u32`, dims `u32 x rank`, data `f64`.
//! Learnable tensors come first in canonical order; each batch-norm layer
//! then adds `cnn.{i}.running_mean`, `cnn.{i}.running_var` and a one-element
//! `cnn.{i}.tracked`.

use std::io::{Read, Write};

use super::config::{ModelConfig, CNN_LAYERS};
use super::params::ModelParams;
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::scene::read_meta;
use crate::tensor::{BatchNormState, Tensor};

pub const BTMD_MAGIC: &[u8; 4] = b"BTMD";
pub const BTMD_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| crate::Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: impl Iterator<Item = f64>) -> Result<()> {
    put_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    put_u32(w, shape.len())?;
    for &d in shape {
        put_u32(w, d)?;
    }
    let mut buf = Vec::new();
    data.for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_btmd<S: Scalar>(w: &mut impl Write, params: &ModelParams<S>) -> Result<()> {
    w.write_all(BTMD_MAGIC)?;
    w.write_all(&BTMD_VERSION.to_le_bytes())?;
    let mut block = Vec::new();
    crate::scene::write_meta(&mut block, &params.config().to_entries())?;
    put_u32(w, block.len())?;
    w.write_all(&block)?;
    put_u32(w, params.tensors().len() + 3 * CNN_LAYERS)?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_tensor(w, name, t.shape(), t.data().iter().map(|v| v.f64()))?;
    }
    for (i, s) in params.bn_states().iter().enumerate() {
        let c = s.channels();
        put_tensor(w, &format!("cnn.{i}.running_mean"), &[c], s.running_mean.iter().map(|v| v.f64()))?;
        put_tensor(w, &format!("cnn.{i}.running_var"), &[c], s.running_var.iter().map(|v| v.f64()))?;
        put_tensor(w, &format!("cnn.{i}.tracked"), &[1], std::iter::once(s.tracked as f64))?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => crate::Error::Format("truncated BTMD file".into()),
        _ => crate::Error::Io(e),
    })?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(take(r)?) as usize)
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        bail!(Format, "truncated BTMD file");
    }
    Ok(buf)
}

fn get_tensor(r: &mut impl Read) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let len = get_u32(r)?;
    if len > 256 {
        bail!(Format, "tensor name of {} bytes", len);
    }
    let name = String::from_utf8(get_bytes(r, len)?).map_err(|_| crate::Error::Format("tensor name is not UTF-8".into()))?;
    let rank = get_u32(r)?;
    if rank > 8 {
        bail!(Format, "tensor {} has rank {}", name, rank);
    }
    let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let Some(n) = n.filter(|&n| n <= 1 << 28) else {
        bail!(Format, "tensor {} has implausible shape {:?}", name, shape);
    };
    let raw = get_bytes(r, n * 8)?;
    let data: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    if data.iter().any(|v| !v.is_finite()) {
        bail!(Format, "tensor {} contains non-finite values", name);
    }
    Ok((name, shape, data))
}

pub fn read_btmd<S: Scalar>(r: &mut impl Read) -> Result<ModelParams<S>> {
    let magic: [u8; 4] = take(r)?;
    if &magic != BTMD_MAGIC {
        bail!(Format, "bad magic {:?}, expected BTMD", magic);
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != BTMD_VERSION {
        bail!(Format, "unsupported BTMD version {}", version);
    }
    let block_len = get_u32(r)?;
    let block = get_bytes(r, block_len)?;
    let config = ModelConfig::from_entries(&read_meta(block.as_slice())?)?;
    let count = get_u32(r)?;
    let learnable = super::params::count_tensors(&config);
    if count != learnable + 3 * CNN_LAYERS {
        bail!(Format, "checkpoint holds {} tensors, config implies {}", count, learnable + 3 * CNN_LAYERS);
    }
    let mut named = Vec::with_capacity(learnable);
    for _ in 0..learnable {
        let (name, shape, data) = get_tensor(r)?;
        named.push((name, Tensor::new(shape, data.into_iter().map(S::of).collect())?));
    }
    let mut bn = Vec::with_capacity(CNN_LAYERS);
    for (i, &c) in config.cnn_channels.iter().enumerate() {
        let mut state = BatchNormState::new(c);
        for (suffix, len) in [("running_mean", c), ("running_var", c), ("tracked", 1)] {
            let (name, shape, data) = get_tensor(r)?;
            if name != format!("cnn.{i}.{suffix}") || shape != [len] {
                bail!(Format, "expected cnn.{}.{} [{}], found {} {:?}", i, suffix, len, name, shape);
            }
            match suffix {
                "running_mean" => state.running_mean = data.into_iter().map(S::of).collect(),
                "running_var" => state.running_var = data.into_iter().map(S::of).collect(),
                _ => state.tracked = data[0] as u64,
            }
        }
        bn.push(state);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        bail!(Format, "trailing bytes after BTMD payload");
    }
    ModelParams::from_parts(config, named, bn).map_err(|e| match e {
        crate::Error::Dimension(m) => crate::Error::Format(m),
        other => other,
    })
}
