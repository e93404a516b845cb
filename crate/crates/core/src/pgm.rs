//! Binary portable graymap (P5) frames, intensities scaled to `[0, 1]`.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::DataMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    /// Row-major, in `[0, 1]`.
    pub pixels: Vec<f64>,
}

fn parse_err(path: &Path, what: &str) -> Error {
    Error::Parse(format!("{}: {what}", path.display()))
}

/// Decodes a P5 image; 8-bit when `maxval < 256`, else 16-bit big-endian.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Frame> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Whitespace and comments between header fields.
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| parse_err(path, "non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(parse_err(path, "not a binary graymap (expected P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, "bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(parse_err(path, "bad dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let raster = bytes.get(pos..pos + need).ok_or_else(|| parse_err(path, "truncated raster"))?;
    let scale = maxval as f64;
    let pixels = if wide {
        raster
            .chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f64 / scale).min(1.0))
            .collect()
    } else {
        raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    };
    Ok(Frame { height, width, pixels })
}

/// 8-bit P5 after clamping to `[0, 1]`.
pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: impl AsRef<Path>, frame: &Frame) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(frame)).map_err(|e| Error::io(path, e))
}

/// `.pgm` files of a directory in file-name order.
pub fn frame_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no .pgm frames in {}", dir.display())));
    }
    Ok(paths)
}

/// Loads frames as the columns of a `h*w x T` matrix.
pub fn read_frames(dir: impl AsRef<Path>) -> Result<DataMatrix> {
    let paths = frame_paths(dir)?;
    let first = read(&paths[0])?;
    let (h, w) = (first.height, first.width);
    let mut m = DMatrix::zeros(h * w, paths.len());
    m.column_mut(0).copy_from_slice(&first.pixels);
    for (t, path) in paths.iter().enumerate().skip(1) {
        let f = read(path)?;
        if (f.height, f.width) != (h, w) {
            return Err(Error::InconsistentData(format!(
                "{} is {}x{} but the first frame is {h}x{w}",
                path.display(),
                f.height,
                f.width
            )));
        }
        m.column_mut(t).copy_from_slice(&f.pixels);
    }
    DataMatrix::new(m)?.with_image_dims(h, w)
}

/// Writes column `t` of `m` as `dir/{prefix}_{t:04}.pgm`.
pub fn write_frames(dir: impl AsRef<Path>, prefix: &str, m: &DMatrix<f64>, h: usize, w: usize) -> Result<()> {
    let dir = dir.as_ref();
    if h * w != m.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{h}x{w} frames from {} pixels",
            m.nrows()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..m.ncols() {
        let frame = Frame {
            height: h,
            width: w,
            pixels: m.column(t).iter().copied().collect(),
        };
        write(dir.join(format!("{prefix}_{t:04}.pgm")), &frame)?;
    }
    Ok(())
}
