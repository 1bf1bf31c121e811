//! Binary containers for snapshot matrices and POD bases.
//!
//! Layout: three little-endian `u64` (magic, rows, cols) followed by the
//! matrix entries as little-endian `f64` in column-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::pod::{PodModes, SnapshotSet};

pub const SNAPSHOT_MAGIC: u64 = 0x504F_4431;
pub const BASIS_MAGIC: u64 = 0x504F_4432;

pub fn write_matrix<W: Write>(mut w: W, magic: u64, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(&magic.to_le_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R, magic: u64) -> Result<DMatrix<f64>> {
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut word)
            .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
        Ok(u64::from_le_bytes(word))
    };
    let found = next(&mut r)?;
    if found != magic {
        return Err(Error::Format(format!(
            "magic {found:#x}, expected {magic:#x}"
        )));
    }
    let rows = next(&mut r)? as usize;
    let cols = next(&mut r)? as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("implausible shape {rows}x{cols}")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != len {
        return Err(Error::Format(format!(
            "{rows}x{cols} matrix needs {len} bytes of data, found {}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of eight")));
    Ok(DMatrix::from_iterator(rows, cols, data))
}

pub fn write_snapshots(path: impl AsRef<Path>, s: &SnapshotSet) -> Result<()> {
    write_matrix(BufWriter::new(File::create(path)?), SNAPSHOT_MAGIC, &s.data)
}

pub fn read_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet> {
    let data = read_matrix(BufReader::new(File::open(path)?), SNAPSHOT_MAGIC)?;
    Ok(SnapshotSet::new(data, None))
}

/// Stores the shift as the first column (zeros when uncentered), then `Φ`.
pub fn write_basis(
    path: impl AsRef<Path>,
    phi: &DMatrix<f64>,
    shift: Option<&DVector<f64>>,
) -> Result<()> {
    let n = phi.nrows();
    let mut m = DMatrix::zeros(n, phi.ncols() + 1);
    if let Some(s) = shift {
        if s.len() != n {
            return Err(Error::DimensionMismatch {
                context: "basis shift",
                expected: n,
                found: s.len(),
            });
        }
        m.set_column(0, s);
    }
    m.columns_mut(1, phi.ncols()).copy_from(phi);
    write_matrix(BufWriter::new(File::create(path)?), BASIS_MAGIC, &m)
}

/// Reads a basis file. An all-zero shift column reads back as no shift.
pub fn read_basis(path: impl AsRef<Path>) -> Result<PodModes> {
    let m = read_matrix(BufReader::new(File::open(path)?), BASIS_MAGIC)?;
    if m.ncols() < 2 {
        return Err(Error::Format("basis file holds no modes".into()));
    }
    let shift = m.column(0).into_owned();
    let shift = if shift.iter().all(|v| *v == 0.0) {
        None
    } else {
        Some(shift)
    };
    Ok(PodModes {
        phi: m.columns(1, m.ncols() - 1).into_owned(),
        shift,
        singular_values: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_and_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, SNAPSHOT_MAGIC, &m).unwrap();
        assert_eq!(buf.len(), 24 + 48);
        assert_eq!(&buf[..8], &0x504F4431u64.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &3u64.to_le_bytes());
        // Column-major: second stored value is row 1, column 0.
        assert_eq!(&buf[32..40], &4.0f64.to_le_bytes());
        assert_eq!(read_matrix(buf.as_slice(), SNAPSHOT_MAGIC).unwrap(), m);
    }

    #[test]
    fn malformed_containers_are_rejected() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let mut buf = Vec::new();
        write_matrix(&mut buf, BASIS_MAGIC, &m).unwrap();
        assert!(matches!(
            read_matrix(buf.as_slice(), SNAPSHOT_MAGIC),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_matrix(&buf[..30], BASIS_MAGIC),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_matrix(&buf[..4], BASIS_MAGIC),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn basis_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.bin");
        let phi = DMatrix::from_fn(5, 2, |i, j| (i + 3 * j) as f64);
        write_basis(&path, &phi, None).unwrap();
        let back = read_basis(&path).unwrap();
        assert_eq!(back.phi, phi);
        assert!(back.shift.is_none());
        let shift = DVector::from_element(5, 0.5);
        write_basis(&path, &phi, Some(&shift)).unwrap();
        assert_eq!(read_basis(&path).unwrap().shift, Some(shift));
        assert!(read_snapshots(&path).is_err());
    }
}
