//! On-disk operator format: magic "CSTA", version u32, m u64, n u64,
//! row pointers (m+1) u64, column indices u32, weights f64, little-endian.

use super::{OperatorError, SparseOperator};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CSTA";
const VERSION: u32 = 1;

impl SparseOperator {
    pub fn save(&self, path: &Path) -> Result<(), OperatorError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        for &p in &self.row_ptr {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for &c in &self.cols {
            w.write_all(&c.to_le_bytes())?;
        }
        for &v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, OperatorError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(OperatorError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(OperatorError::Format(format!("unsupported version {version}")));
        }
        let m = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        if n > u32::MAX as usize {
            return Err(OperatorError::Format(format!("column count {n} exceeds index width")));
        }
        let mut row_ptr = Vec::with_capacity(m + 1);
        for _ in 0..=m {
            row_ptr.push(read_u64(&mut r)? as usize);
        }
        if row_ptr.first() != Some(&0) || row_ptr.windows(2).any(|w| w[1] < w[0]) {
            return Err(OperatorError::Format("row pointers not monotone from zero".into()));
        }
        let nnz = *row_ptr.last().unwrap();
        let mut cols = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let c = read_u32(&mut r)?;
            if c as usize >= n {
                return Err(OperatorError::Format(format!("column index {c} out of range")));
            }
            cols.push(c);
        }
        let mut weights = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let v = f64::from_le_bytes(read_array(&mut r)?);
            if !v.is_finite() || v < 0.0 {
                return Err(OperatorError::Format(format!("weight {v} not finite and non-negative")));
            }
            weights.push(v);
        }
        let mut trailer = [0u8; 1];
        if r.read(&mut trailer)? != 0 {
            return Err(OperatorError::Format("trailing bytes after weights".into()));
        }
        Ok(Self { m, n, row_ptr, cols, weights })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], OperatorError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, OperatorError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64, OperatorError> {
    Ok(u64::from_le_bytes(read_array(r)?))
}
