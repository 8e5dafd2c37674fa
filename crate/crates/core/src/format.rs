//! Binary file formats.
//!
//! `CTSF` (tensor): magic `CTSF`, u32 version = 1, u32 rank, rank × u32
//! dims, then product(dims) × f64 values. `CTSM` (mask): magic `CTSM`,
//! u32 version = 1, u32 H, u32 W, then H·W × u16 class ids. All integers
//! and floats are little-endian.
//!
//! Named checkpoints are a plain concatenation of CTSF records plus a text
//! index next to them (`<file>.index`, one `name<TAB>offset` per line).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CtsError, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"CTSF";
pub const MASK_MAGIC: &[u8; 4] = b"CTSM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one CTSF record from the front of `bytes`, returning the tensor
/// and the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut r = Reader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    r.version()?;
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.fail("dimension product overflows"))?;
    r.need(n.saturating_mul(8))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(r.take::<8>()?));
    }
    let t = Tensor::new(shape, data)?;
    Ok((t, r.pos))
}

pub fn encode_mask(height: usize, width: usize, labels: &[u16]) -> Vec<u8> {
    debug_assert_eq!(labels.len(), height * width);
    let mut out = Vec::with_capacity(16 + 2 * labels.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

/// Decodes a CTSM record into `(height, width, labels)`.
pub fn decode_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut r = Reader::new(bytes);
    r.magic(MASK_MAGIC)?;
    r.version()?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| r.fail("mask size overflows"))?;
    r.need(n.saturating_mul(2))?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u16::from_le_bytes(r.take::<2>()?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after mask payload"));
    }
    Ok((h, w, labels))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| CtsError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CtsError::io(path, e))?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(CtsError::Format {
            offset: used,
            message: "trailing bytes after tensor payload".into(),
        });
    }
    Ok(t)
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index");
    PathBuf::from(s)
}

/// Writes a sequence of named tensors plus its `name<TAB>offset` index.
pub fn write_named(path: impl AsRef<Path>, tensors: &[(String, &Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let mut blob = Vec::new();
    let mut index = String::new();
    for (name, t) in tensors {
        if name.contains(['\t', '\n']) {
            return Err(CtsError::Usage(format!("tensor name {name:?} contains a tab or newline")));
        }
        index.push_str(&format!("{}\t{}\n", name, blob.len()));
        blob.extend_from_slice(&encode_tensor(t));
    }
    fs::write(path, blob).map_err(|e| CtsError::io(path, e))?;
    let ipath = index_path(path);
    fs::write(&ipath, index).map_err(|e| CtsError::io(&ipath, e))
}

pub fn read_named(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let blob = fs::read(path).map_err(|e| CtsError::io(path, e))?;
    let ipath = index_path(path);
    let index = fs::read_to_string(&ipath).map_err(|e| CtsError::io(&ipath, e))?;
    let mut out = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, off) = line.split_once('\t').ok_or_else(|| {
            CtsError::Config(format!("{}:{}: expected name<TAB>offset", ipath.display(), lineno + 1))
        })?;
        let offset: usize = off.trim().parse().map_err(|_| {
            CtsError::Config(format!("{}:{}: bad offset {off:?}", ipath.display(), lineno + 1))
        })?;
        if offset > blob.len() {
            return Err(CtsError::Format {
                offset,
                message: format!("index entry {name:?} points past end of file"),
            });
        }
        let (t, _) = decode_tensor(&blob[offset..]).map_err(|e| match e {
            CtsError::Format { offset: o, message } => CtsError::Format {
                offset: offset + o,
                message,
            },
            other => other,
        })?;
        out.push((name.to_string(), t));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn fail(&self, message: impl Into<String>) -> CtsError {
        CtsError::Format {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn need(&self, n: usize) -> Result<()> {
        if self.bytes.len().saturating_sub(self.pos) < n {
            return Err(self.fail(format!(
                "truncated: need {} more bytes, {} available",
                n,
                self.bytes.len().saturating_sub(self.pos)
            )));
        }
        Ok(())
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        self.need(N)?;
        let mut buf = [0u8; N];
        buf.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take::<4>()?))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take::<4>()?;
        if &got != expected {
            return Err(CtsError::Format {
                offset: start,
                message: format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(&got)
                ),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let start = self.pos;
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(CtsError::Format {
                offset: start,
                message: format!("unsupported version {v}, expected {FORMAT_VERSION}"),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_is_bit_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let bytes = encode_tensor(&t);
        let mut expected = b"CTSF".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn mask_layout_is_bit_exact() {
        let bytes = encode_mask(1, 2, &[3, 258]);
        assert_eq!(
            bytes,
            [b'C', b'T', b'S', b'M', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 2, 1]
        );
        assert_eq!(decode_mask(&bytes).unwrap(), (1, 2, vec![3, 258]));
    }

    #[test]
    fn truncated_tensor_reports_offset() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f64);
        let bytes = encode_tensor(&t);
        for cut in [0, 3, 7, 11, 15, bytes.len() - 1] {
            match decode_tensor(&bytes[..cut]) {
                Err(CtsError::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn corrupted_magic_names_expected() {
        let mut bytes = encode_tensor(&Tensor::scalar(1.0));
        bytes[0] = b'X';
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(err.to_string().contains("CTSF"), "{err}");
        assert!(matches!(err, CtsError::Format { offset: 0, .. }));

        let mut mask = encode_mask(1, 1, &[0]);
        mask[3] = b'F';
        let err = decode_mask(&mask).unwrap_err();
        assert!(err.to_string().contains("CTSM"), "{err}");
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = encode_tensor(&Tensor::scalar(1.0));
        bytes[4] = 2;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(CtsError::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn named_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25);
        let b = Tensor::scalar(-7.0);
        write_named(&path, &[("a".into(), &a), ("blk.0.b".into(), &b)]).unwrap();
        let index = fs::read_to_string(index_path(&path)).unwrap();
        assert_eq!(index, format!("a\t0\nblk.0.b\t{}\n", encode_tensor(&a).len()));
        let back = read_named(&path).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("blk.0.b".to_string(), b)]);
    }
}
