//! Dense matrix file formats: plain CSV and a binary row-major layout with an
//! 8-byte little-endian header carrying the dimension.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{AteError, Result};

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|tok| tok.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| {
            AteError::InvalidConfig(format!("bad CSV value on line {}: {e}", lineno + 1))
        })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(AteError::InvalidConfig(format!(
                    "ragged CSV: line {} has {} fields, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(AteError::InvalidConfig("empty matrix file".into()));
    }
    let nr = rows.len();
    let nc = rows[0].len();
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Binary layout: u64 LE dimension `n`, then `n*n` f64 LE values row-major.
pub fn write_matrix_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(AteError::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix_bin(path: &Path) -> Result<DMatrix<f64>> {
    let mut file = BufReader::new(File::open(path)?);
    let mut header = [0u8; 8];
    file.read_exact(&mut header)?;
    let n = u64::from_le_bytes(header) as usize;
    let mut buf = vec![0u8; n * n * 8];
    file.read_exact(&mut buf)?;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let off = (i * n + j) * 8;
            m[(i, j)] = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        }
    }
    Ok(m)
}

/// Reads either format, deciding by extension (`.bin` is binary, anything
/// else is CSV).
pub fn read_matrix_auto(path: &Path) -> Result<DMatrix<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => read_matrix_bin(path),
        _ => read_matrix_csv(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_binary_round_trip() {
        let dir = std::env::temp_dir().join("ate-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let m = DMatrix::from_row_slice(3, 3, &[1.5, -2.0, 0.25, -2.0, 4.0, 1e-17, 0.25, 1e-17, 9.0]);
        let csv = dir.join("m.csv");
        write_matrix_csv(&csv, &m).unwrap();
        assert_eq!(read_matrix_csv(&csv).unwrap(), m);
        let bin = dir.join("m.bin");
        write_matrix_bin(&bin, &m).unwrap();
        assert_eq!(read_matrix_bin(&bin).unwrap(), m);
    }

    #[test]
    fn ragged_csv_is_rejected() {
        let dir = std::env::temp_dir().join("ate-io-test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ragged.csv");
        std::fs::write(&path, "1,2,3\n4,5\n").unwrap();
        assert!(read_matrix_csv(&path).is_err());
    }
}
