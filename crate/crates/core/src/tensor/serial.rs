//! `IVAT` binary tensor container.
//!
//! Layout, all little-endian: 4-byte magic `IVAT`, `u32` rank, `rank` × `u64`
//! extents, then the row-major `f64` payload. Checkpoints and feature files
//! are built from consecutive records in this format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{IvaError, Result};
use crate::tensor::Tensor;

pub const IVAT_MAGIC: &[u8; 4] = b"IVAT";

/// Write one tensor record. Returns the number of bytes written.
pub fn write_tensor(w: &mut impl Write, t: &Tensor, path: &str) -> Result<u64> {
    let mut written = 0u64;
    let mut put = |buf: &[u8], w: &mut dyn Write| -> Result<()> {
        w.write_all(buf).map_err(|e| IvaError::io(path, e))?;
        written += buf.len() as u64;
        Ok(())
    };
    put(IVAT_MAGIC, w)?;
    put(&(t.shape().len() as u32).to_le_bytes(), w)?;
    for &e in t.shape() {
        put(&(e as u64).to_le_bytes(), w)?;
    }
    for &v in t.data() {
        put(&v.to_le_bytes(), w)?;
    }
    Ok(written)
}

/// Read one tensor record starting at byte `base_offset` (used for error
/// reporting when records are concatenated in one file).
pub fn read_tensor(r: &mut impl Read, base_offset: u64, path: &str) -> Result<(Tensor, u64)> {
    let mut offset = base_offset;
    let mut take = |buf: &mut [u8], r: &mut dyn Read, what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|_| IvaError::Format {
            offset,
            message: format!("truncated {what} in `{path}`"),
        })?;
        offset += buf.len() as u64;
        Ok(())
    };

    let mut magic = [0u8; 4];
    take(&mut magic, r, "magic")?;
    if &magic != IVAT_MAGIC {
        return Err(IvaError::Format {
            offset: base_offset,
            message: format!("bad magic {magic:?} in `{path}`, expected `IVAT`"),
        });
    }
    let mut rank_buf = [0u8; 4];
    take(&mut rank_buf, r, "rank")?;
    let rank = u32::from_le_bytes(rank_buf) as usize;
    if rank == 0 || rank > 8 {
        return Err(IvaError::Format {
            offset: base_offset + 4,
            message: format!("implausible rank {rank} in `{path}`"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        take(&mut ext, r, "extent")?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0f64; numel];
    for v in data.iter_mut() {
        let mut fb = [0u8; 8];
        take(&mut fb, r, "payload")?;
        *v = f64::from_le_bytes(fb);
    }
    let t = Tensor::new(shape, data).map_err(|e| IvaError::Format {
        offset: base_offset,
        message: format!("inconsistent record in `{path}`: {e}"),
    })?;
    Ok((t, offset - base_offset))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let p = path.as_ref().display().to_string();
    let file = File::create(path.as_ref()).map_err(|e| IvaError::io(&p, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t, &p)?;
    w.flush().map_err(|e| IvaError::io(&p, e))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let p = path.as_ref().display().to_string();
    let file = File::open(path.as_ref()).map_err(|e| IvaError::io(&p, e))?;
    let mut r = BufReader::new(file);
    let (t, _) = read_tensor(&mut r, 0, &p)?;
    Ok(t)
}

/// Size in bytes of one record for a tensor of the given shape.
pub fn record_size(shape: &[usize]) -> u64 {
    let numel: u64 = shape.iter().map(|&e| e as u64).product();
    4 + 4 + 8 * shape.len() as u64 + 8 * numel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_identity() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, -0.125]).unwrap();
        let mut buf = Vec::new();
        let n = write_tensor(&mut buf, &t, "mem").unwrap();
        assert_eq!(n, record_size(&[2, 3]));
        let (back, read) = read_tensor(&mut buf.as_slice(), 0, "mem").unwrap();
        assert_eq!(read, n);
        assert_eq!(back.shape(), t.shape());
        let bits: Vec<u64> = t.data().iter().map(|f| f.to_bits()).collect();
        let bits2: Vec<u64> = back.data().iter().map(|f| f.to_bits()).collect();
        assert_eq!(bits, bits2);
    }

    #[test]
    fn corrupt_magic_reports_offset() {
        let t = Tensor::scalar(1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, "mem").unwrap();
        buf[0] = b'X';
        let err = read_tensor(&mut buf.as_slice(), 0, "mem").unwrap_err();
        match err {
            IvaError::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, "mem").unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_tensor(&mut buf.as_slice(), 0, "mem").unwrap_err();
        assert!(matches!(err, IvaError::Format { .. }));
    }
}
