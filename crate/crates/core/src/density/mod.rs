//! Distribution analysis of spectrogram values conditioned on a phoneme:
//! Gaussian kernel density estimates of single-bin marginals and of
//! two-cell joints, plus the dip statistic for multimodality.
//!
//! Bandwidths default to Silverman's rule `h = 1.06 * sd * n^(-1/5)` per
//! dimension, with the sample standard deviation using `n - 1`.

mod dip;

pub use dip::{dip_statistic, DipResult};

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{gather_phoneme_frames, Utterance};

pub const GRID_POINTS_1D: usize = 512;
pub const GRID_POINTS_2D: usize = 128;
/// Auto grids extend this many bandwidths past the sample range.
pub const GRID_MARGIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Density1D {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
}

impl Density1D {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }

    /// Grid positions of strict interior local maxima.
    pub fn local_maxima(&self) -> Vec<f64> {
        let v = &self.values;
        (1..v.len().saturating_sub(1))
            .filter(|&i| v[i] > v[i - 1] && v[i] >= v[i + 1])
            .map(|i| self.grid[i])
            .collect()
    }

    pub fn argmax(&self) -> f64 {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.values[best] { i } else { best });
        self.grid[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Density2D {
    pub grid_x: Vec<f64>,
    pub grid_y: Vec<f64>,
    /// Row-major, `values[i * grid_y.len() + j]` is the density at `(grid_x[i], grid_y[j])`.
    pub values: Vec<f64>,
    pub bandwidths: (f64, f64),
}

impl Density2D {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid_y.len() + j]
    }

    /// Iterated trapezoidal integral.
    pub fn integral(&self) -> f64 {
        let ny = self.grid_y.len();
        let rows: Vec<f64> = (0..self.grid_x.len())
            .map(|i| trapezoid(&self.grid_y, &self.values[i * ny..(i + 1) * ny]))
            .collect();
        trapezoid(&self.grid_x, &rows)
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySample);
    }
    let sd = sample_sd(xs);
    if sd == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(1.06 * sd * (xs.len() as f64).powf(-0.2))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn auto_grid(xs: &[f64], h: f64, n: usize) -> Vec<f64> {
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    linspace(lo - GRID_MARGIN * h, hi + GRID_MARGIN * h, n)
}

fn check_bandwidth(h: f64) -> Result<f64> {
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(Error::InvalidArgument(format!("bandwidth {h} must be positive")))
    }
}

fn gaussian(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

/// Gaussian KDE of a scalar sample.
///
/// Without `grid`, evaluates on [`GRID_POINTS_1D`] points spanning
/// `[min - 4h, max + 4h]`.
pub fn kde1d(samples: &[f64], bandwidth: Option<f64>, grid: Option<&[f64]>) -> Result<Density1D> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let h = match bandwidth {
        Some(h) => check_bandwidth(h)?,
        None => silverman_bandwidth(samples)?,
    };
    let grid = match grid {
        Some(g) => g.to_vec(),
        None => auto_grid(samples, h, GRID_POINTS_1D),
    };
    let norm = 1.0 / (samples.len() as f64 * h);
    let values = grid
        .iter()
        .map(|&g| norm * samples.iter().map(|&s| gaussian((g - s) / h)).sum::<f64>())
        .collect();
    Ok(Density1D {
        grid,
        values,
        bandwidth: h,
    })
}

/// Product-Gaussian KDE of paired samples on a [`GRID_POINTS_2D`]-square grid.
pub fn kde2d(pairs: &[(f64, f64)], bandwidths: Option<(f64, f64)>) -> Result<Density2D> {
    if pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    if let Some(i) = xs.iter().chain(&ys).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i % pairs.len()));
    }
    let (hx, hy) = match bandwidths {
        Some((hx, hy)) => (check_bandwidth(hx)?, check_bandwidth(hy)?),
        None => (silverman_bandwidth(&xs)?, silverman_bandwidth(&ys)?),
    };
    let grid_x = auto_grid(&xs, hx, GRID_POINTS_2D);
    let grid_y = auto_grid(&ys, hy, GRID_POINTS_2D);
    let (nx, ny) = (grid_x.len(), grid_y.len());
    // separable kernel: density = sum_s kx[s][i] * ky[s][j]
    let mut values = vec![0.0; nx * ny];
    let mut kx = vec![0.0; nx];
    let mut ky = vec![0.0; ny];
    for (&sx, &sy) in xs.iter().zip(&ys) {
        for (k, &g) in kx.iter_mut().zip(&grid_x) {
            *k = gaussian((g - sx) / hx);
        }
        for (k, &g) in ky.iter_mut().zip(&grid_y) {
            *k = gaussian((g - sy) / hy);
        }
        for (i, &a) in kx.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &mut values[i * ny..(i + 1) * ny];
            for (v, &b) in row.iter_mut().zip(&ky) {
                *v += a * b;
            }
        }
    }
    let norm = 1.0 / (pairs.len() as f64 * hx * hy);
    values.iter_mut().for_each(|v| *v *= norm);
    Ok(Density2D {
        grid_x,
        grid_y,
        values,
        bandwidths: (hx, hy),
    })
}

/// All values of bin `f` in frames attributed to `ph`, pooled over the corpus
/// in utterance order.
pub fn phoneme_values(corpus: &[Utterance], ph: &str, f: usize) -> Result<Vec<f64>> {
    check_bin(corpus, f)?;
    let mut out = Vec::new();
    let mut present = false;
    for u in corpus {
        if !u.align.contains(ph) {
            continue;
        }
        present = true;
        let frames = gather_phoneme_frames(&u.spec, &u.align, ph)?;
        out.extend(frames.column(f));
    }
    if !present {
        return Err(Error::PhonemeAbsent(ph.to_string()));
    }
    Ok(out)
}

fn check_bin(corpus: &[Utterance], f: usize) -> Result<()> {
    match corpus.iter().find(|u| f >= u.spec.bins()) {
        Some(u) => Err(Error::BinOutOfRange {
            bin: f,
            bins: u.spec.bins(),
        }),
        None => Ok(()),
    }
}

/// KDE of the marginal distribution of bin `f` given phoneme `ph`.
pub fn phoneme_marginal(corpus: &[Utterance], ph: &str, f: usize) -> Result<Density1D> {
    let values = phoneme_values(corpus, ph, f)?;
    kde1d(&values, None, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointAxis {
    /// `(y(t, f1), y(t, f2))`
    Freq { f1: usize, f2: usize },
    /// `(y(t, f), y(t + lag, f))`, both frames inside one span
    Time { f: usize, lag: usize },
}

/// Value pairs for a joint distribution. Time-axis pairs never straddle span
/// boundaries.
pub fn phoneme_pairs(corpus: &[Utterance], ph: &str, axis: JointAxis) -> Result<Vec<(f64, f64)>> {
    match axis {
        JointAxis::Freq { f1, f2 } => {
            check_bin(corpus, f1)?;
            check_bin(corpus, f2)?;
        }
        JointAxis::Time { f, lag } => {
            check_bin(corpus, f)?;
            if lag == 0 {
                return Err(Error::InvalidArgument("time lag must be at least 1".into()));
            }
        }
    }
    let mut present = false;
    let mut pairs = Vec::new();
    for u in corpus {
        for e in u.align.spans_of(ph) {
            present = true;
            if e.end > u.spec.frames() {
                return Err(Error::SpanOutOfRange {
                    start: e.start,
                    end: e.end,
                    frames: u.spec.frames(),
                });
            }
            match axis {
                JointAxis::Freq { f1, f2 } => {
                    pairs.extend((e.start..e.end).map(|t| (u.spec.get(t, f1), u.spec.get(t, f2))));
                }
                JointAxis::Time { f, lag } => {
                    if e.len() > lag {
                        pairs.extend((e.start..e.end - lag).map(|t| (u.spec.get(t, f), u.spec.get(t + lag, f))));
                    }
                }
            }
        }
    }
    if !present {
        return Err(Error::PhonemeAbsent(ph.to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    Ok(pairs)
}

pub fn phoneme_joint(corpus: &[Utterance], ph: &str, axis: JointAxis) -> Result<Density2D> {
    kde2d(&phoneme_pairs(corpus, ph, axis)?, None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DipCell {
    pub phoneme: String,
    pub bin: usize,
    pub n: usize,
    pub dip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanDip {
    pub mean: f64,
    /// Evaluated cells in lexicographic `(phoneme, bin)` order.
    pub cells: Vec<DipCell>,
    /// Cells with fewer than two samples, excluded from the mean.
    pub skipped: Vec<(String, usize)>,
}

/// Average dip over every `(phoneme, bin)` cell with at least two samples.
pub fn mean_dip(corpus: &[Utterance], bins: &[usize], phonemes: &[String]) -> Result<MeanDip> {
    let mut keys: Vec<(String, usize)> = phonemes
        .iter()
        .flat_map(|p| bins.iter().map(move |&f| (p.clone(), f)))
        .collect();
    keys.sort();
    keys.dedup();
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for (ph, f) in keys {
        let values = match phoneme_values(corpus, &ph, f) {
            Ok(v) => v,
            Err(Error::PhonemeAbsent(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        if values.len() < 2 {
            skipped.push((ph, f));
            continue;
        }
        let d = dip_statistic(&values)?;
        cells.push(DipCell {
            phoneme: ph,
            bin: f,
            n: d.n,
            dip: d.dip,
        });
    }
    if cells.is_empty() {
        return Err(Error::EmptySample);
    }
    let mean = cells.iter().map(|c| c.dip).sum::<f64>() / cells.len() as f64;
    Ok(MeanDip { mean, cells, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Alignment, AlignmentEntry, Spectrogram};

    fn utt(frames: usize, bins: usize, values: Vec<f32>, spans: &[(&str, usize, usize)]) -> Utterance {
        Utterance {
            spec: Spectrogram::new(frames, bins, values).unwrap(),
            align: Alignment::new(
                spans
                    .iter()
                    .map(|&(l, s, e)| AlignmentEntry {
                        label: l.into(),
                        start: s,
                        end: e,
                    })
                    .collect(),
            )
            .unwrap(),
        }
    }

    #[test]
    fn single_sample_peak_is_standard_normal_pdf() {
        let d = kde1d(&[0.0], Some(1.0), Some(&[-1.0, 0.0, 1.0])).unwrap();
        assert!((d.values[1] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((d.values[1] - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn symmetric_sample_gives_symmetric_density() {
        let xs = [-2.0, -0.5, 0.5, 2.0, -1.0, 1.0];
        let d = kde1d(&xs, None, None).unwrap();
        let n = d.values.len();
        for i in 0..n {
            assert!((d.values[i] - d.values[n - 1 - i]).abs() < 1e-9);
        }
    }

    #[test]
    fn auto_grid_integrates_to_one() {
        let xs: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        let d = kde1d(&xs, None, None).unwrap();
        assert_eq!(d.grid.len(), 512);
        assert!((0.98..=1.02).contains(&d.integral()));
    }

    #[test]
    fn zero_variance_needs_bandwidth() {
        assert!(matches!(kde1d(&[1.0, 1.0], None, None), Err(Error::ZeroVariance)));
        assert!(kde1d(&[1.0, 1.0], Some(0.1), None).is_ok());
        assert!(matches!(kde1d(&[], None, None), Err(Error::EmptySample)));
        assert!(kde1d(&[1.0], Some(0.0), None).is_err());
    }

    #[test]
    fn kde2d_single_pair_peak() {
        let d = kde2d(&[(0.0, 0.0)], Some((1.0, 1.0))).unwrap();
        assert_eq!(d.grid_x.len(), 128);
        // grid is symmetric with an even count, so evaluate the closed form at the nearest point
        let i = 64;
        let (x, y) = (d.grid_x[i], d.grid_y[i]);
        let expected = (-(x * x + y * y) / 2.0).exp() / (2.0 * PI);
        assert!((d.at(i, i) - expected).abs() < 1e-15);
        assert!((d.values.iter().cloned().fold(0.0, f64::max) - 1.0 / (2.0 * PI)).abs() < 2e-3);
    }

    #[test]
    fn kde2d_integrates_to_one() {
        let pairs: Vec<(f64, f64)> = (0..300)
            .map(|i| {
                let a = ((i * 17) % 59) as f64 / 7.0;
                (a, a * 0.5 + ((i * 5) % 13) as f64 / 5.0)
            })
            .collect();
        let d = kde2d(&pairs, None).unwrap();
        assert!((0.95..=1.05).contains(&d.integral()), "{}", d.integral());
    }

    #[test]
    fn diagonal_pairs_decay_off_diagonal() {
        let pairs: Vec<(f64, f64)> = (0..100).map(|i| (f64::from(i) / 10.0, f64::from(i) / 10.0)).collect();
        let h = 0.3;
        let d = kde2d(&pairs, Some((h, h))).unwrap();
        for (i, &x) in d.grid_x.iter().enumerate() {
            for (j, &y) in d.grid_y.iter().enumerate() {
                if (x - y).abs() / 2f64.sqrt() > 6.0 * h {
                    assert!(d.at(i, j) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn marginal_of_constant_phoneme_peaks_at_value() {
        let mut v = vec![0.0f32; 20 * 2];
        for t in 5..15 {
            v[t * 2 + 1] = 2.5;
        }
        let c = [utt(20, 2, v, &[("A", 0, 5), ("R", 5, 15), ("A", 15, 20)])];
        let d = kde1d(&phoneme_values(&c, "R", 1).unwrap(), Some(0.1), None).unwrap();
        assert!((d.argmax() - 2.5).abs() < 0.01);
        assert!(matches!(phoneme_marginal(&c, "R", 2), Err(Error::BinOutOfRange { .. })));
        assert!(matches!(phoneme_marginal(&c, "Q", 0), Err(Error::PhonemeAbsent(_))));
    }

    #[test]
    fn time_pairs_stay_inside_spans() {
        let v: Vec<f32> = (0..10).map(|i| i as f32).collect();
        let c = [utt(10, 1, v, &[("A", 0, 3), ("B", 3, 5), ("A", 5, 7)])];
        let p = phoneme_pairs(&c, "A", JointAxis::Time { f: 0, lag: 1 }).unwrap();
        assert_eq!(p, vec![(0.0, 1.0), (1.0, 2.0), (5.0, 6.0)]);
        let q = phoneme_pairs(&c, "B", JointAxis::Time { f: 0, lag: 2 });
        assert!(matches!(q, Err(Error::NoPairs)));
    }

    #[test]
    fn single_frame_span_has_no_time_pairs() {
        let c = [utt(3, 1, vec![0.0, 1.0, 2.0], &[("R", 1, 2)])];
        assert!(matches!(
            phoneme_joint(&c, "R", JointAxis::Time { f: 0, lag: 1 }),
            Err(Error::NoPairs)
        ));
    }

    #[test]
    fn mean_dip_single_cell_matches_direct() {
        let v: Vec<f32> = (0..30).map(|i| ((i * 13) % 7) as f32).collect();
        let c = [utt(30, 1, v.clone(), &[("A", 0, 30)])];
        let m = mean_dip(&c, &[0], &["A".to_string(), "Z".to_string()]).unwrap();
        let direct = dip_statistic(&v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>()).unwrap();
        assert_eq!(m.mean, direct.dip);
        assert_eq!(m.skipped, vec![("Z".to_string(), 0)]);
    }
}
