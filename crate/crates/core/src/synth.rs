//! Synthetic datasets with known structure: two Gaussian classes and a
//! video of a static background crossed by a moving bright square.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::DataMatrix;

/// Labelled samples with the class labels in column order.
#[derive(Debug, Clone)]
pub struct Labelled {
    pub x: DataMatrix,
    pub labels: Vec<usize>,
}

/// `n` samples in `p` dimensions from two unit-variance Gaussians whose
/// means are `separation` apart along the diagonal direction. The first
/// `n / 2` columns are class 0.
pub fn two_gaussians(n: usize, p: usize, separation: f64, seed: u64) -> Result<Labelled> {
    if n < 2 || p == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples and 1 feature, got n = {n}, p = {p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = separation / 2.0 / (p as f64).sqrt();
    let labels: Vec<usize> = (0..n).map(|j| usize::from(j >= n / 2)).collect();
    let mut m = DMatrix::zeros(p, n);
    for (j, &c) in labels.iter().enumerate() {
        let mean = if c == 0 { -offset } else { offset };
        for i in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            m[(i, j)] = mean + z;
        }
    }
    Ok(Labelled {
        x: DataMatrix::new(m)?,
        labels,
    })
}

/// Ground truth for a synthetic video.
#[derive(Debug, Clone)]
pub struct Video {
    /// `h*w x frames`, intensities in `[0, 1]`, with image dims attached.
    pub frames: DataMatrix,
    /// Static background, `h*w` pixels.
    pub background: Vec<f64>,
    /// `true` where the square covers a pixel in a frame.
    pub mask: DMatrix<bool>,
}

impl Video {
    /// Pixels the square never covers.
    pub fn never_occluded(&self) -> Vec<usize> {
        (0..self.mask.nrows())
            .filter(|&i| !self.mask.row(i).iter().any(|&m| m))
            .collect()
    }
}

pub const SQUARE_INTENSITY: f64 = 1.0;

/// Smooth background in `[0.2, 0.6]` plus a `side x side` square of
/// intensity 1 moving along a Lissajous path in the middle rows. With `moving = false` the
/// square is absent.
pub fn moving_square_video(h: usize, w: usize, frames: usize, side: usize, moving: bool, seed: u64) -> Result<Video> {
    if h == 0 || w == 0 || frames == 0 || side == 0 || side > h || side > w {
        return Err(Error::InvalidArgument(format!(
            "bad video shape {h}x{w}, {frames} frames, square {side}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut background = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
            let v = 0.4 + 0.1 * (std::f64::consts::TAU * fx * x + phase).sin() + 0.1 * (std::f64::consts::TAU * fy * y).cos();
            background[r * w + c] = v;
        }
    }
    let mut data = DMatrix::zeros(h * w, frames);
    let mut mask = DMatrix::from_element(h * w, frames, false);
    // The square stays in the middle half of the rows, so the top and
    // bottom quarters are never occluded.
    let band_top = h / 4;
    let span_x = (w - side) as f64;
    let span_y = (h / 2).saturating_sub(side) as f64;
    for t in 0..frames {
        for (i, b) in background.iter().enumerate() {
            data[(i, t)] = *b;
        }
        if !moving {
            continue;
        }
        // Lissajous path: several pixels per frame, no exact revisits.
        let s = t as f64 / frames as f64;
        let left = ((0.5 + 0.5 * (std::f64::consts::TAU * 7.0 * s).sin()) * span_x).round() as usize;
        let top = band_top + ((0.5 + 0.5 * (std::f64::consts::TAU * 5.0 * s + 1.0).sin()) * span_y).round() as usize;
        for r in top..top + side {
            for c in left..left + side {
                data[(r * w + c, t)] = SQUARE_INTENSITY;
                mask[(r * w + c, t)] = true;
            }
        }
    }
    Ok(Video {
        frames: DataMatrix::new(data)?.with_image_dims(h, w)?,
        background,
        mask,
    })
}
