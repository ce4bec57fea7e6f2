//! `BTDS` dataset files and their `.meta` text sidecars.
//!
//! Layout (little-endian): magic `BTDS`, version `u32`, then `T, L, J, C,
//! channels, height, width` as `u32`, `T` frames as `f32` (channel-major,
//! row-major), `T` labels as `u32`, `T` `(azimuth, range)` pairs as `f64`.

use std::io::{BufRead, Read, Write};

use super::dataset::{Dataset, DatasetMeta};
use crate::error::{bail, Result};

pub const BTDS_MAGIC: &[u8; 4] = b"BTDS";
pub const BTDS_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| crate::Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_btds(w: &mut impl Write, ds: &Dataset) -> Result<()> {
    let m = ds.meta();
    w.write_all(BTDS_MAGIC)?;
    w.write_all(&BTDS_VERSION.to_le_bytes())?;
    for v in [m.frames_total, m.history, m.horizon, m.codebook_size, m.channels, m.height, m.width] {
        put_u32(w, v)?;
    }
    let mut buf = Vec::with_capacity(ds.frames().len() * 4);
    ds.frames().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    w.write_all(&buf)?;
    for &l in ds.labels() {
        w.write_all(&l.to_le_bytes())?;
    }
    for &(theta, range) in ds.geometry() {
        w.write_all(&theta.to_le_bytes())?;
        w.write_all(&range.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => crate::Error::Format("truncated BTDS file".into()),
        _ => crate::Error::Io(e),
    })?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_exact(r)?) as usize)
}

/// Reads a `BTDS` stream. The train/validation split is rebuilt with `split_ratio`.
pub fn read_btds(r: &mut impl Read, split_ratio: f64) -> Result<Dataset> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != BTDS_MAGIC {
        bail!(Format, "bad magic {:?}, expected BTDS", magic);
    }
    let version = get_u32(r)? as u32;
    if version != BTDS_VERSION {
        bail!(Format, "unsupported BTDS version {}", version);
    }
    let meta = DatasetMeta {
        frames_total: get_u32(r)?,
        history: get_u32(r)?,
        horizon: get_u32(r)?,
        codebook_size: get_u32(r)?,
        channels: get_u32(r)?,
        height: get_u32(r)?,
        width: get_u32(r)?,
    };
    meta.validate().map_err(|e| crate::Error::Format(e.to_string()))?;
    let t = meta.frames_total;

    let mut raw = vec![0u8; t * meta.frame_len() * 4];
    r.read_exact(&mut raw)
        .map_err(|_| crate::Error::Format("truncated BTDS frame block".into()))?;
    let frames: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if frames.iter().any(|v| !v.is_finite()) {
        bail!(Format, "BTDS frames contain non-finite values");
    }
    let labels = (0..t)
        .map(|_| Ok(u32::from_le_bytes(read_exact(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let geometry = (0..t)
        .map(|_| {
            let theta = f64::from_le_bytes(read_exact(r)?);
            let range = f64::from_le_bytes(read_exact(r)?);
            Ok((theta, range))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        bail!(Format, "trailing bytes after BTDS payload");
    }
    Dataset::new(meta, frames, labels, geometry, split_ratio).map_err(|e| match e {
        crate::Error::Index(msg) | crate::Error::Dimension(msg) => crate::Error::Format(msg),
        other => other,
    })
}

/// Writes `key=value` lines.
pub fn write_meta(w: &mut impl Write, entries: &[(String, String)]) -> Result<()> {
    for (k, v) in entries {
        writeln!(w, "{k}={v}")?;
    }
    Ok(())
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn read_meta(r: impl BufRead) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(Format, "line {}: expected key=value, got {:?}", n + 1, line);
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Header entries of a dataset in `.meta` form.
pub(crate) fn meta_entries(m: &DatasetMeta) -> Vec<(String, String)> {
    [
        ("format", "BTDS".to_string()),
        ("version", BTDS_VERSION.to_string()),
        ("frames_total", m.frames_total.to_string()),
        ("history", m.history.to_string()),
        ("horizon", m.horizon.to_string()),
        ("codebook_size", m.codebook_size.to_string()),
        ("channels", m.channels.to_string()),
        ("height", m.height.to_string()),
        ("width", m.width.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl Dataset {
    /// `.meta` sidecar lines mirroring the binary header.
    pub fn header_entries(&self) -> Vec<(String, String)> {
        meta_entries(self.meta())
    }
}
