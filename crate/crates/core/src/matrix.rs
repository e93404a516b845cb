//! Data matrices, on-disk formats, preprocessing and corruption generators.
//!
//! A [`DataMatrix`] is `p x n`: each column is a sample and each row a
//! feature. Image datasets additionally carry `(h, w)` with `h * w = p`;
//! pixels are vectorized row-major (`index = row * w + col`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Magic bytes of the binary matrix format.
pub const BINARY_MAGIC: &[u8; 4] = b"FRPM";

#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    image_dims: Option<(usize, usize)>,
}

impl DataMatrix {
    /// Wraps a dense matrix, rejecting empty shapes and non-finite entries.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "data matrix must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::InvalidArgument(format!(
                "non-finite entry at ({r}, {c})"
            )));
        }
        Ok(DataMatrix {
            values,
            image_dims: None,
        })
    }

    pub fn from_row_slice(p: usize, n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != p * n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {p}x{n} matrix",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(p, n, data))
    }

    /// Attaches image dimensions; requires `h * w` to equal the feature count.
    pub fn with_image_dims(mut self, h: usize, w: usize) -> Result<Self> {
        if h * w != self.feature_count() {
            return Err(Error::DimensionMismatch(format!(
                "image dims {h}x{w} do not match {} features",
                self.feature_count()
            )));
        }
        self.image_dims = Some((h, w));
        Ok(self)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn feature_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.image_dims
    }

    /// Replaces the values while keeping image dims. Used by operations that
    /// are shape-preserving.
    pub(crate) fn map_values(&self, values: DMatrix<f64>) -> Self {
        debug_assert_eq!(values.shape(), self.values.shape());
        DataMatrix {
            values,
            image_dims: self.image_dims,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    BinaryF64,
}

impl MatrixFormat {
    /// `.csv` and `.txt` are read as CSV, everything else as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") || ext.eq_ignore_ascii_case("txt") => {
                MatrixFormat::Csv
            }
            _ => MatrixFormat::BinaryF64,
        }
    }
}

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<DataMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    match format {
        MatrixFormat::Csv => read_csv(reader),
        MatrixFormat::BinaryF64 => {
            let mut bytes = Vec::new();
            reader
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes)
        }
    }
}

pub fn save_matrix(path: impl AsRef<Path>, x: &DataMatrix, format: MatrixFormat) -> Result<()> {
    save_dense(path, x.values(), format)
}

/// Writes any dense matrix (covariance, Gamma, ...) in one of the matrix formats.
pub fn save_dense(path: impl AsRef<Path>, m: &DMatrix<f64>, format: MatrixFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        MatrixFormat::Csv => write_csv(&mut w, m),
        MatrixFormat::BinaryF64 => w.write_all(&encode_binary(m)),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_csv(reader: impl Read) -> Result<DataMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut ncols = 0;
    let mut nrows = 0;
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("csv: {e}")))?;
        if nrows == 0 {
            ncols = record.len();
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Parse(format!(
                    "non-numeric cell {cell:?} at row {}, column {}",
                    line + 1,
                    col + 1
                ))
            })?;
            data.push(v);
        }
        nrows += 1;
    }
    if nrows == 0 || ncols == 0 {
        return Err(Error::Parse("empty matrix file".into()));
    }
    DataMatrix::new(DMatrix::from_row_slice(nrows, ncols, &data))
        .map_err(|e| Error::Parse(e.to_string()))
}

fn write_csv(w: &mut impl Write, m: &DMatrix<f64>) -> std::io::Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                w.write_all(b",")?;
            }
            // Debug formatting of f64 is the shortest round-tripping form.
            write!(w, "{:?}", m[(r, c)])?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// `"FRPM"`, `u64` p, `u64` n, then `p * n` little-endian `f64` in column-major order.
pub fn encode_binary(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * m.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    // nalgebra storage is column-major already
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<DataMatrix> {
    if bytes.len() < 20 || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Parse("missing FRPM header".into()));
    }
    let p = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = p
        .checked_mul(n)
        .and_then(|len| len.checked_mul(8))
        .ok_or_else(|| Error::Parse("matrix dimensions overflow".into()))?;
    let payload = &bytes[20..];
    if payload.len() != expected {
        return Err(Error::Parse(format!(
            "payload holds {} bytes, header {p}x{n} requires {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DataMatrix::new(DMatrix::from_vec(p, n, data)).map_err(|e| Error::Parse(e.to_string()))
}

/// Zero mean and unit sample standard deviation along each feature (row).
/// Rows without variance become all-zero.
pub fn standardize(x: &DataMatrix) -> DataMatrix {
    let mut out = x.values().clone();
    let n = out.ncols();
    for mut row in out.row_iter_mut() {
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|v| *v -= mean);
        let ss: f64 = row.iter().map(|v| v * v).sum();
        let std = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
        let scale = mean.abs().max(row.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        if std <= 1e-14 * scale.max(f64::MIN_POSITIVE) || std == 0.0 {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= std);
        }
    }
    x.map_values(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    /// One square occlusion per image, filled with [`BLOCK_FILL`].
    Block,
    /// Distinct pixels per image set to [`MISSING_FILL`].
    Missing,
}

pub const BLOCK_FILL: f64 = 1.0;
pub const MISSING_FILL: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub fraction: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "corruption fraction {fraction} outside [0, 1]"
            )));
        }
        Ok(CorruptionSpec {
            kind,
            fraction,
            seed,
        })
    }
}

/// `ceil(fraction * p)`, ignoring floating-point dust such as `0.1 * 30 = 3.0000000000000004`.
pub fn corrupted_count(fraction: f64, p: usize) -> usize {
    let x = fraction * p as f64;
    let r = x.round();
    let m = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (m as usize).min(p)
}

/// Side of the square occlusion block, clipped to the image.
pub fn block_side(fraction: f64, h: usize, w: usize) -> usize {
    let side = (fraction * (h * w) as f64).sqrt().round() as usize;
    side.min(h).min(w)
}

/// Applies the corruption to every column. Returns the corrupted matrix and a
/// mask marking the corrupted entries; all other entries are bitwise preserved.
pub fn corrupt(x: &DataMatrix, spec: &CorruptionSpec) -> Result<(DataMatrix, DMatrix<bool>)> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(Error::InvalidArgument(format!(
            "corruption fraction {} outside [0, 1]",
            spec.fraction
        )));
    }
    let (p, n) = x.values().shape();
    let mut out = x.values().clone();
    let mut mask = DMatrix::from_element(p, n, false);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        CorruptionKind::Block => {
            let (h, w) = x.image_dims().ok_or_else(|| {
                Error::InvalidArgument("block corruption requires image dimensions".into())
            })?;
            let side = block_side(spec.fraction, h, w);
            if side == 0 {
                return Ok((x.clone(), mask));
            }
            for j in 0..n {
                let top = rng.random_range(0..=h - side);
                let left = rng.random_range(0..=w - side);
                for r in top..top + side {
                    for c in left..left + side {
                        let i = r * w + c;
                        out[(i, j)] = BLOCK_FILL;
                        mask[(i, j)] = true;
                    }
                }
            }
        }
        CorruptionKind::Missing => {
            let m = corrupted_count(spec.fraction, p);
            if m == 0 {
                return Ok((x.clone(), mask));
            }
            for j in 0..n {
                for i in sample(&mut rng, p, m) {
                    out[(i, j)] = MISSING_FILL;
                    mask[(i, j)] = true;
                }
            }
        }
    }
    Ok((x.map_values(out), mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(p: usize, n: usize, data: &[f64]) -> DataMatrix {
        DataMatrix::from_row_slice(p, n, data).unwrap()
    }

    #[test]
    fn csv_reads_rows_as_features() {
        let x = read_csv("1,2\n3,4".as_bytes()).unwrap();
        assert_eq!(x.values(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(read_csv("".as_bytes()), Err(Error::Parse(_))));
        assert!(matches!(read_csv("1,2\n3".as_bytes()), Err(Error::Parse(_))));
        assert!(matches!(read_csv("1,x\n3,4".as_bytes()), Err(Error::Parse(_))));
        assert!(matches!(read_csv("1,nan".as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn binary_rejects_truncated_payload() {
        let m = DMatrix::from_element(3, 2, 1.5);
        let mut bytes = encode_binary(&m);
        assert_eq!(decode_binary(&bytes).unwrap().values(), &m);
        bytes.pop();
        assert!(decode_binary(&bytes).is_err());
        assert!(decode_binary(b"XXXX").is_err());
    }

    #[test]
    fn standardize_row() {
        let x = standardize(&dm(1, 3, &[1.0, 2.0, 3.0]));
        let row = x.values().row(0);
        let mean = row.sum() / 3.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
        assert!(mean.abs() < 1e-15);
        assert!((var.sqrt() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn standardize_constant_row_is_zero() {
        let x = standardize(&dm(2, 3, &[5.0, 5.0, 5.0, 1.0, 2.0, 4.0]));
        assert!(x.values().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_single_sample() {
        let x = standardize(&dm(2, 1, &[3.0, -1.0]));
        assert!(x.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_fraction_is_identity() {
        let x = dm(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .with_image_dims(2, 2)
            .unwrap();
        for kind in [CorruptionKind::Block, CorruptionKind::Missing] {
            let (y, mask) = corrupt(&x, &CorruptionSpec::new(kind, 0.0, 7).unwrap()).unwrap();
            assert_eq!(y, x);
            assert!(mask.iter().all(|m| !m));
        }
    }

    #[test]
    fn missing_count_per_column() {
        let x = DataMatrix::new(DMatrix::from_fn(16, 5, |i, j| 1.0 + (i * 5 + j) as f64)).unwrap();
        let (y, mask) =
            corrupt(&x, &CorruptionSpec::new(CorruptionKind::Missing, 0.25, 3).unwrap()).unwrap();
        for j in 0..5 {
            assert_eq!(mask.column(j).iter().filter(|&&m| m).count(), 4);
            assert_eq!(y.values().column(j).iter().filter(|&&v| v == 0.0).count(), 4);
        }
    }

    #[test]
    fn block_needs_image_dims() {
        let x = dm(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let spec = CorruptionSpec::new(CorruptionKind::Block, 0.25, 0).unwrap();
        assert!(matches!(corrupt(&x, &spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn block_is_a_square() {
        let x = DataMatrix::new(DMatrix::from_element(100, 3, 0.5))
            .unwrap()
            .with_image_dims(10, 10)
            .unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::Block, 0.25, 11).unwrap();
        let (y, mask) = corrupt(&x, &spec).unwrap();
        for j in 0..3 {
            let hits: Vec<usize> = (0..100).filter(|&i| mask[(i, j)]).collect();
            assert_eq!(hits.len(), 25);
            let rows: Vec<usize> = hits.iter().map(|i| i / 10).collect();
            let cols: Vec<usize> = hits.iter().map(|i| i % 10).collect();
            assert_eq!(rows.iter().max().unwrap() - rows.iter().min().unwrap(), 4);
            assert_eq!(cols.iter().max().unwrap() - cols.iter().min().unwrap(), 4);
            assert!(hits.iter().all(|&i| y.values()[(i, j)] == BLOCK_FILL));
        }
    }

    #[test]
    fn corrupted_count_ignores_rounding_dust() {
        assert_eq!(corrupted_count(0.1, 30), 3);
        assert_eq!(corrupted_count(0.25, 16), 4);
        assert_eq!(corrupted_count(0.15, 10), 2);
        assert_eq!(corrupted_count(1.0, 10), 10);
    }

    #[test]
    fn image_dims_checked() {
        assert!(dm(4, 1, &[0.0; 4]).with_image_dims(3, 2).is_err());
        assert!(DataMatrix::new(DMatrix::zeros(0, 3)).is_err());
    }
}
