//! Binary tensor container shared by model checkpoints and adapter files.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! magic[4] version
//! meta_len meta_bytes          UTF-8 `key=value` lines
//! n_tensors
//!   name_len name ndims dims[ndims] f32 data (row-major)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;

pub(crate) type Meta = BTreeMap<String, String>;

pub(crate) fn encode(magic: &[u8; 4], meta: &Meta, tensors: &[(String, &Matrix<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    buf.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_text.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
        buf.extend_from_slice(&m.to_le_bytes());
    }
    buf
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub(crate) fn write(path: &Path, magic: &[u8; 4], meta: &Meta, tensors: &[(String, &Matrix<f32>)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, encode(magic, meta, tensors)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub(crate) fn decode(path: &Path, buf: &[u8], magic: &[u8; 4]) -> Result<(Meta, Vec<(String, Matrix<f32>)>)> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4) != Some(&magic[..]) {
        return Err(corrupt(format!("expected magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = c.u32().ok_or_else(|| corrupt("truncated header".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = c.u32().ok_or_else(|| corrupt("truncated header".into()))? as usize;
    let meta_bytes = c.take(meta_len).ok_or_else(|| corrupt("truncated metadata block".into()))?;
    let meta_text = std::str::from_utf8(meta_bytes).map_err(|_| corrupt("metadata is not UTF-8".into()))?;
    let mut meta = Meta::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("metadata line without '=': {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let n = c.u32().ok_or_else(|| corrupt("truncated tensor count".into()))?;
    let mut tensors = Vec::with_capacity(n as usize);
    for i in 0..n {
        let trunc = || corrupt(format!("truncated tensor block {i}"));
        let name_len = c.u32().ok_or_else(trunc)? as usize;
        let name = std::str::from_utf8(c.take(name_len).ok_or_else(trunc)?)
            .map_err(|_| corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndims = c.u32().ok_or_else(trunc)?;
        if ndims != 2 {
            return Err(corrupt(format!("tensor {name}: expected 2 dims, found {ndims}")));
        }
        let rows = c.u32().ok_or_else(trunc)? as usize;
        let cols = c.u32().ok_or_else(trunc)? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| corrupt(format!("tensor {name}: dimensions overflow")))?;
        let bytes = c.take(len).ok_or_else(trunc)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if c.pos != buf.len() {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok((meta, tensors))
}

pub(crate) fn read(path: &Path, magic: &[u8; 4]) -> Result<(Meta, Vec<(String, Matrix<f32>)>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &buf, magic)
}

pub(crate) fn meta_get<T: std::str::FromStr>(path: &Path, meta: &Meta, key: &str) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("missing or invalid metadata field {key:?}"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_truncation_is_rejected() {
        let m = Matrix::from_vec(2, 2, vec![1.0f32, -2.0, 3.5, 0.0]);
        let meta = Meta::from([("k".to_string(), "v".to_string())]);
        let buf = encode(b"TEST", &meta, &[("w".into(), &m)]);
        let p = Path::new("mem");
        let (meta2, tensors) = decode(p, &buf, b"TEST").unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(tensors[0].1, m);
        for cut in 0..buf.len() {
            assert!(decode(p, &buf[..cut], b"TEST").is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch() {
        let mut buf = encode(b"TEST", &Meta::new(), &[]);
        buf[4] = 9;
        assert!(matches!(decode(Path::new("x"), &buf, b"TEST"), Err(Error::Version { found: 9, .. })));
    }
}
