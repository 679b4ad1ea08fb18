//! Objective sharpness and similarity measures over spectrogram grids.
//!
//! * [`var_laplacian`]: variance of the absolute response of the 5-point
//!   Laplacian mask `(1/6)[[0,-1,0],[-1,4,-1],[0,-1,0]]`, taken over the
//!   valid `(T-2) x (F-2)` response. Larger means sharper.
//! * [`ssim`] / [`ssim_map`]: windowed two-factor structural similarity,
//!   `(2 mu_a mu_b + C1)/(mu_a^2 + mu_b^2 + C1) * (2 cov + C2)/(var_a + var_b + C2)`,
//!   evaluated at every cell with reflect padding at the borders.
//!
//! SSIM inputs are first mapped affinely from a dynamic range onto `[0, 1]`
//! because the stabilizers `C1 = 0.01^2`, `C2 = 0.03^2` assume unit range.
//! The value is not clamped: negative covariance yields negative cells.

use crate::dsp::reflect_index;
use crate::error::{Error, Result};
use crate::types::{Grid, Spectrogram};

/// Row-major 3x3 Laplacian mask. Sums to zero.
pub const LAPLACIAN_MASK: [[f64; 3]; 3] = [
    [0.0, -1.0 / 6.0, 0.0],
    [-1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0],
    [0.0, -1.0 / 6.0, 0.0],
];

/// Valid cross-correlation with [`LAPLACIAN_MASK`].
pub fn laplacian_response(spec: &Spectrogram) -> Result<Grid> {
    laplacian_response_grid(&spec.to_grid())
}

pub fn laplacian_response_grid(g: &Grid) -> Result<Grid> {
    let (rows, cols) = g.shape();
    if rows < 3 || cols < 3 {
        return Err(Error::GridTooSmall {
            frames: rows,
            bins: cols,
            min_frames: 3,
            min_bins: 3,
        });
    }
    let mut out = Grid::zeros(rows - 2, cols - 2);
    for t in 1..rows - 1 {
        for f in 1..cols - 1 {
            let neighbours = g.get(t - 1, f) + g.get(t + 1, f) + g.get(t, f - 1) + g.get(t, f + 1);
            out.set(t - 1, f - 1, (4.0 * g.get(t, f) - neighbours) / 6.0);
        }
    }
    Ok(out)
}

/// Variance (divided by the response cell count) of `|laplacian_response|`.
pub fn var_laplacian(spec: &Spectrogram) -> Result<f64> {
    var_laplacian_grid(&spec.to_grid())
}

pub fn var_laplacian_grid(g: &Grid) -> Result<f64> {
    let resp = laplacian_response_grid(g)?;
    let abs: Vec<f64> = resp.data().iter().map(|v| v.abs()).collect();
    let n = abs.len() as f64;
    let mean = abs.iter().sum::<f64>() / n;
    Ok(abs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SsimWindow {
    /// Uniform weights over the `W x W` window.
    Box,
    /// Gaussian weights with the given standard deviation in cells.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DynamicRange {
    /// Joint min/max over both inputs.
    Auto,
    Fixed { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window_size: usize,
    pub c1: f64,
    pub c2: f64,
    pub range: DynamicRange,
    pub window: SsimWindow,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            c1: 1e-4,
            c2: 9e-4,
            range: DynamicRange::Auto,
            window: SsimWindow::Box,
        }
    }
}

impl SsimConfig {
    fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "ssim window {} must be odd and at least 3",
                self.window_size
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidArgument("ssim constants must be positive".into()));
        }
        if let SsimWindow::Gaussian { sigma } = self.window {
            if !(sigma > 0.0) {
                return Err(Error::InvalidArgument("gaussian window sigma must be positive".into()));
            }
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        let w = self.window_size;
        let r = (w / 2) as f64;
        let raw: Vec<f64> = match self.window {
            SsimWindow::Box => vec![1.0; w * w],
            SsimWindow::Gaussian { sigma } => (0..w * w)
                .map(|i| {
                    let (dy, dx) = ((i / w) as f64 - r, (i % w) as f64 - r);
                    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                })
                .collect(),
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn normalized_pair(a: &Grid, b: &Grid, range: DynamicRange) -> Result<(Grid, Grid)> {
    let (lo, hi) = match range {
        DynamicRange::Fixed { lo, hi } => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::DegenerateRange { lo, hi });
            }
            (lo, hi)
        }
        DynamicRange::Auto => {
            let (lo, hi) = a
                .data()
                .iter()
                .chain(b.data())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if lo == hi {
                // Both inputs are the same constant; any offset-only map preserves them.
                let zeros = Grid::zeros(a.rows(), a.cols());
                return Ok((zeros.clone(), zeros));
            }
            (lo, hi)
        }
    };
    let scale = hi - lo;
    let map = |g: &Grid| {
        let d = g.data().iter().map(|&v| (v - lo) / scale).collect();
        Grid::from_vec(g.rows(), g.cols(), d)
    };
    Ok((map(a)?, map(b)?))
}

/// Per-cell SSIM of two equally shaped spectrograms.
pub fn ssim_map(a: &Spectrogram, b: &Spectrogram, cfg: &SsimConfig) -> Result<Grid> {
    ssim_map_grid(&a.to_grid(), &b.to_grid(), cfg)
}

pub fn ssim_map_grid(a: &Grid, b: &Grid, cfg: &SsimConfig) -> Result<Grid> {
    cfg.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.data().is_empty() {
        return Err(Error::ShapeMismatch("empty grids".into()));
    }
    let (x, y) = normalized_pair(a, b, cfg.range)?;
    let (rows, cols) = x.shape();
    let w = cfg.window_size;
    let r = (w / 2) as isize;
    let weights = cfg.weights();
    let mut out = Grid::zeros(rows, cols);
    // window contents gathered once per cell; reused for means and moments
    let mut wx = vec![0.0; w * w];
    let mut wy = vec![0.0; w * w];
    for t in 0..rows {
        for f in 0..cols {
            for dy in 0..w {
                let rr = reflect_index(t as isize + dy as isize - r, rows);
                for dx in 0..w {
                    let cc = reflect_index(f as isize + dx as isize - r, cols);
                    wx[dy * w + dx] = x.get(rr, cc);
                    wy[dy * w + dx] = y.get(rr, cc);
                }
            }
            let (mut mx, mut my) = (0.0, 0.0);
            for ((p, q), k) in wx.iter().zip(&wy).zip(&weights) {
                mx += k * p;
                my += k * q;
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for ((p, q), k) in wx.iter().zip(&wy).zip(&weights) {
                let (dp, dq) = (p - mx, q - my);
                vx += k * (dp * dp);
                vy += k * (dq * dq);
                cov += k * (dp * dq);
            }
            let luminance = (2.0 * (mx * my) + cfg.c1) / (mx * mx + my * my + cfg.c1);
            let structure = (2.0 * cov + cfg.c2) / (vx + vy + cfg.c2);
            out.set(t, f, luminance * structure);
        }
    }
    Ok(out)
}

/// Mean of [`ssim_map`].
pub fn ssim(a: &Spectrogram, b: &Spectrogram, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_map(a, b, cfg)?.mean())
}

pub fn ssim_grid(a: &Grid, b: &Grid, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_map_grid(a, b, cfg)?.mean())
}
