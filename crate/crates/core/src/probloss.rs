//! Training objectives over spectrogram grids: pointwise MAE/MSE, the SSIM
//! loss, and a per-cell mixture of `K` Laplace components.
//!
//! Mixture fields are stored cell-major with the component index fastest:
//! parameter `k` of cell `(t, f)` lives at `(t * F + f) * K + k`.
//!
//! Unconstrained parameters map to a valid field through
//! `pi = softmax(a)` and `beta = softplus(s) + BETA_FLOOR`. The sub-gradient
//! of `|y - mu|` at `y == mu` is taken as 0.
//!
//! `LMF1` container: magic, `u32` LE `K`, `T`, `F`, then the `pi`, `mu` and
//! `beta` planes, each `T * F * K` little-endian `f32` in the layout above.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{Envelope, EnvelopeReader};
use crate::metrics::{ssim, SsimConfig};
use crate::optim::{decayed, Adam};
use crate::rng::SeededRng;
use crate::types::Spectrogram;

pub const BETA_FLOOR: f64 = 1e-3;
pub const LMF_MAGIC: &[u8; 4] = b"LMF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLoss {
    Mae,
    Mse,
}

fn check_shapes(a: &Spectrogram, b: &Spectrogram) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over all cells of `|pred - target|` or `(pred - target)^2`.
pub fn elementwise_loss(kind: PointLoss, pred: &Spectrogram, target: &Spectrogram) -> Result<f64> {
    check_shapes(pred, target)?;
    if pred.values().is_empty() {
        return Err(Error::ShapeMismatch("empty grids".into()));
    }
    let total: f64 = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| {
            let d = f64::from(p) - f64::from(t);
            match kind {
                PointLoss::Mae => d.abs(),
                PointLoss::Mse => d * d,
            }
        })
        .sum();
    Ok(total / pred.values().len() as f64)
}

pub fn ssim_loss(pred: &Spectrogram, target: &Spectrogram, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim(pred, target, cfg)?)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln La(y; mu, beta)`.
pub fn laplace_log_density(y: f64, mu: f64, beta: f64) -> f64 {
    -(2.0 * beta).ln() - (y - mu).abs() / beta
}

pub fn laplace_cdf(y: f64, mu: f64, beta: f64) -> f64 {
    let z = (y - mu) / beta;
    if z < 0.0 {
        0.5 * z.exp()
    } else {
        1.0 - 0.5 * (-z).exp()
    }
}

/// Inverse CDF; `u` in the open unit interval.
pub fn laplace_quantile(u: f64, mu: f64, beta: f64) -> f64 {
    let d = u - 0.5;
    mu - beta * sign0(d) * (1.0 - 2.0 * d.abs()).ln()
}

/// Negative log-likelihood of `y` under one cell's mixture.
pub fn cell_nll(pi: &[f64], mu: &[f64], beta: &[f64], y: f64) -> f64 {
    let terms: Vec<f64> = (0..pi.len())
        .map(|k| pi[k].ln() + laplace_log_density(y, mu[k], beta[k]))
        .collect();
    -log_sum_exp(&terms)
}

/// One draw from a cell's mixture: component by weight, then inverse CDF.
pub fn sample_cell(pi: &[f64], mu: &[f64], beta: &[f64], rng: &mut SeededRng) -> f64 {
    let k = rng.categorical(pi);
    laplace_quantile(rng.uniform_open(), mu[k], beta[k])
}

pub fn mixture_cdf(pi: &[f64], mu: &[f64], beta: &[f64], y: f64) -> f64 {
    (0..pi.len()).map(|k| pi[k] * laplace_cdf(y, mu[k], beta[k])).sum()
}

/// A validated field of per-cell Laplace mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceMixtureField {
    k: usize,
    frames: usize,
    bins: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl LaplaceMixtureField {
    pub fn new(
        k: usize,
        frames: usize,
        bins: usize,
        weights: Vec<f64>,
        means: Vec<f64>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        let n = frames * bins * k;
        for plane in [&weights, &means, &scales] {
            if plane.len() != n {
                return Err(Error::DimensionMismatch {
                    declared: n,
                    actual: plane.len(),
                });
            }
        }
        for plane in [&weights, &means, &scales] {
            if let Some(i) = plane.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        if let Some(&value) = scales.iter().find(|&&b| b < BETA_FLOOR) {
            return Err(Error::ScaleBelowFloor {
                value,
                floor: BETA_FLOOR,
            });
        }
        for (cell, w) in weights.chunks(k).enumerate() {
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || w.iter().any(|&p| p < 0.0) {
                return Err(Error::WeightsNotNormalized { cell, sum });
            }
        }
        Ok(Self {
            k,
            frames,
            bins,
            weights,
            means,
            scales,
        })
    }

    /// Same mixture in every cell.
    pub fn uniform(frames: usize, bins: usize, pi: &[f64], mu: &[f64], beta: &[f64]) -> Result<Self> {
        let cells = frames * bins;
        Self::new(
            pi.len(),
            frames,
            bins,
            pi.repeat(cells),
            mu.repeat(cells),
            beta.repeat(cells),
        )
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// `(pi, mu, beta)` of cell index `t * F + f`.
    pub fn cell(&self, i: usize) -> (&[f64], &[f64], &[f64]) {
        let r = i * self.k..(i + 1) * self.k;
        (&self.weights[r.clone()], &self.means[r.clone()], &self.scales[r])
    }

    fn check_target(&self, target: &Spectrogram) -> Result<()> {
        if target.shape() != (self.frames, self.bins) {
            return Err(Error::ShapeMismatch(format!(
                "mixture field {:?} vs target {:?}",
                (self.frames, self.bins),
                target.shape()
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut env = Envelope::new(*LMF_MAGIC);
        env.push_u32(self.k as u32);
        env.push_u32(self.frames as u32);
        env.push_u32(self.bins as u32);
        env.push_f64s_as_f32(&self.weights);
        env.push_f64s_as_f32(&self.means);
        env.push_f64s_as_f32(&self.scales);
        env.into_bytes()
    }

    /// Decodes an `LMF1` buffer. Weights are renormalized per cell after the
    /// single-precision round trip.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = EnvelopeReader::new(bytes, LMF_MAGIC)?;
        let k = r.u32()? as usize;
        let frames = r.u32()? as usize;
        let bins = r.u32()? as usize;
        let n = k * frames * bins;
        if r.remaining() != 3 * n * 4 {
            return Err(Error::DimensionMismatch {
                declared: 3 * n,
                actual: r.remaining() / 4,
            });
        }
        let mut weights = r.f32s_as_f64(n)?;
        let means = r.f32s_as_f64(n)?;
        let scales = r.f32s_as_f64(n)?;
        r.finish()?;
        if k > 0 {
            for w in weights.chunks_mut(k) {
                let s: f64 = w.iter().sum();
                if s > 0.0 {
                    w.iter_mut().for_each(|p| *p /= s);
                }
            }
        }
        Self::new(k, frames, bins, weights, means, scales)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Long-form CSV: `t,f,k,pi,mu,beta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,f,k,pi,mu,beta\n");
        for t in 0..self.frames {
            for f in 0..self.bins {
                let (pi, mu, beta) = self.cell(t * self.bins + f);
                for k in 0..self.k {
                    let _ = writeln!(out, "{t},{f},{k},{},{},{}", pi[k], mu[k], beta[k]);
                }
            }
        }
        out
    }
}

/// Mean per-cell negative log-likelihood of `target`.
pub fn lm_nll(field: &LaplaceMixtureField, target: &Spectrogram) -> Result<f64> {
    lm_nll_batch(field, std::slice::from_ref(target))
}

/// Mean over targets and cells.
pub fn lm_nll_batch(field: &LaplaceMixtureField, targets: &[Spectrogram]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptySample);
    }
    let cells = field.frames * field.bins;
    let mut total = 0.0;
    for target in targets {
        field.check_target(target)?;
        for (i, &y) in target.values().iter().enumerate() {
            let (pi, mu, beta) = field.cell(i);
            total += cell_nll(pi, mu, beta, f64::from(y));
        }
    }
    Ok(total / (cells * targets.len()) as f64)
}

/// Raw, unconstrained parameters in the field layout.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedMixtureParams {
    pub k: usize,
    pub frames: usize,
    pub bins: usize,
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub raw_scales: Vec<f64>,
}

impl UnconstrainedMixtureParams {
    pub fn zeros(k: usize, frames: usize, bins: usize) -> Self {
        let n = k * frames * bins;
        Self {
            k,
            frames,
            bins,
            logits: vec![0.0; n],
            means: vec![0.0; n],
            raw_scales: vec![0.0; n],
        }
    }

    pub fn from_field(field: &LaplaceMixtureField) -> Self {
        Self {
            k: field.k,
            frames: field.frames,
            bins: field.bins,
            logits: field.weights.iter().map(|p| p.max(1e-300).ln()).collect(),
            means: field.means.clone(),
            raw_scales: field.scales.iter().map(|b| softplus_inv(b - BETA_FLOOR)).collect(),
        }
    }

    pub fn to_field(&self) -> Result<LaplaceMixtureField> {
        self.check_finite()?;
        let mut weights = Vec::with_capacity(self.logits.len());
        for a in self.logits.chunks(self.k) {
            weights.extend(softmax(a));
        }
        let scales = self.raw_scales.iter().map(|&s| softplus(s) + BETA_FLOOR).collect();
        LaplaceMixtureField::new(self.k, self.frames, self.bins, weights, self.means.clone(), scales)
    }

    fn check_finite(&self) -> Result<()> {
        for plane in [&self.logits, &self.means, &self.raw_scales] {
            if let Some(i) = plane.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(())
    }
}

fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Accumulates the gradient of `sum_y NLL(y)` for one cell into `g*`.
/// Returns the summed NLL.
#[allow(clippy::too_many_arguments)]
fn cell_grad(
    a: &[f64],
    mu: &[f64],
    s: &[f64],
    ys: &[f64],
    ga: &mut [f64],
    gmu: &mut [f64],
    gs: &mut [f64],
) -> f64 {
    let k = a.len();
    let pi = softmax(a);
    let beta: Vec<f64> = s.iter().map(|&v| softplus(v) + BETA_FLOOR).collect();
    let dbeta_ds: Vec<f64> = s.iter().map(|&v| sigmoid(v)).collect();
    let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    let mut l = vec![0.0; k];
    let mut total = 0.0;
    for &y in ys {
        for j in 0..k {
            l[j] = log_pi[j] + laplace_log_density(y, mu[j], beta[j]);
        }
        let lse = log_sum_exp(&l);
        total -= lse;
        for j in 0..k {
            let r = (l[j] - lse).exp();
            ga[j] += pi[j] - r;
            let d = y - mu[j];
            gmu[j] -= r * sign0(d) / beta[j];
            let dnll_dbeta = -r * (-1.0 / beta[j] + d.abs() / (beta[j] * beta[j]));
            gs[j] += dnll_dbeta * dbeta_ds[j];
        }
    }
    total
}

/// Value and gradient of [`lm_nll`] with respect to the raw parameters.
pub fn lm_nll_grad(
    params: &UnconstrainedMixtureParams,
    target: &Spectrogram,
) -> Result<(f64, UnconstrainedMixtureParams)> {
    lm_nll_grad_batch(params, std::slice::from_ref(target))
}

pub fn lm_nll_grad_batch(
    params: &UnconstrainedMixtureParams,
    targets: &[Spectrogram],
) -> Result<(f64, UnconstrainedMixtureParams)> {
    params.check_finite()?;
    if targets.is_empty() {
        return Err(Error::EmptySample);
    }
    let (k, frames, bins) = (params.k, params.frames, params.bins);
    for t in targets {
        if t.shape() != (frames, bins) {
            return Err(Error::ShapeMismatch(format!(
                "params {:?} vs target {:?}",
                (frames, bins),
                t.shape()
            )));
        }
    }
    let cells = frames * bins;
    let mut g = UnconstrainedMixtureParams::zeros(k, frames, bins);
    let mut total = 0.0;
    let mut ys = vec![0.0; targets.len()];
    for i in 0..cells {
        for (y, t) in ys.iter_mut().zip(targets) {
            *y = f64::from(t.values()[i]);
        }
        let r = i * k..(i + 1) * k;
        total += cell_grad(
            &params.logits[r.clone()],
            &params.means[r.clone()],
            &params.raw_scales[r.clone()],
            &ys,
            &mut g.logits[r.clone()],
            &mut g.means[r.clone()],
            &mut g.raw_scales[r],
        );
    }
    let norm = (cells * targets.len()) as f64;
    for plane in [&mut g.logits, &mut g.means, &mut g.raw_scales] {
        plane.iter_mut().for_each(|v| *v /= norm);
    }
    if !total.is_finite() || g.check_finite().is_err() {
        return Err(Error::NonFiniteIntermediate("lm_nll_grad"));
    }
    Ok((total / norm, g))
}

/// Draws one grid: every cell independently.
pub fn lm_sample(field: &LaplaceMixtureField, rng: &mut SeededRng) -> Result<Spectrogram> {
    let cells = field.frames * field.bins;
    let values: Vec<f64> = (0..cells)
        .map(|i| {
            let (pi, mu, beta) = field.cell(i);
            sample_cell(pi, mu, beta, rng)
        })
        .collect();
    Spectrogram::from_f64(field.frames, field.bins, &values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmFitConfig {
    pub k: usize,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for LmFitConfig {
    fn default() -> Self {
        Self {
            k: 5,
            steps: 400,
            step_size: 0.05,
            restarts: 5,
            seed: 0,
        }
    }
}

/// Result of fitting one cell: components sorted by ascending mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFit {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    pub nll: f64,
}

/// Fits one cell's mixture to `ys` by Adam on the raw parameters, keeping
/// the best of `cfg.restarts` seeded starts.
pub fn fit_cell(ys: &[f64], cfg: &LmFitConfig, rng: &SeededRng) -> Result<CellFit> {
    let k = cfg.k;
    if k == 0 || cfg.restarts == 0 {
        return Err(Error::InvalidArgument("need K >= 1 and at least one restart".into()));
    }
    if ys.len() < k {
        return Err(Error::TooFewSamples {
            needed: k,
            got: ys.len(),
        });
    }
    if let Some(i) = ys.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut best: Option<CellFit> = None;
    for restart in 0..cfg.restarts {
        let mut r = rng.substream(restart as u64);
        // k-means++ seeding on data points, so an all-equal sample stays exact
        let mut mu0 = vec![ys[r.below(ys.len())]];
        while mu0.len() < k {
            let d2: Vec<f64> = ys
                .iter()
                .map(|y| mu0.iter().map(|m| (y - m) * (y - m)).fold(f64::INFINITY, f64::min))
                .collect();
            let pick = if d2.iter().sum::<f64>() > 0.0 {
                r.categorical(&d2)
            } else {
                r.below(ys.len())
            };
            mu0.push(ys[pick]);
        }
        let spread = ys
            .iter()
            .map(|y| mu0.iter().map(|m| (y - m).abs()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / ys.len() as f64;
        let s0 = softplus_inv((spread - BETA_FLOOR).max(1e-7));
        // flat layout [a; mu; s]
        let mut p = vec![0.0; 3 * k];
        p[k..2 * k].copy_from_slice(&mu0);
        p[2 * k..].iter_mut().for_each(|v| *v = s0);
        let mut opt = Adam::new(3 * k, cfg.step_size);
        let mut g = vec![0.0; 3 * k];
        for step in 0..cfg.steps {
            g.iter_mut().for_each(|v| *v = 0.0);
            let (ga, rest) = g.split_at_mut(k);
            let (gmu, gs) = rest.split_at_mut(k);
            cell_grad(&p[..k], &p[k..2 * k], &p[2 * k..], ys, ga, gmu, gs);
            let n = ys.len() as f64;
            g.iter_mut().for_each(|v| *v /= n);
            opt.step_with(&mut p, &g, decayed(cfg.step_size, step, cfg.steps, 0.1));
        }
        let (mut ga, mut gmu, mut gs) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
        let nll = cell_grad(&p[..k], &p[k..2 * k], &p[2 * k..], ys, &mut ga, &mut gmu, &mut gs)
            / ys.len() as f64;
        if !nll.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| nll < b.nll) {
            let pi = softmax(&p[..k]);
            let beta: Vec<f64> = p[2 * k..].iter().map(|&s| softplus(s) + BETA_FLOOR).collect();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&i, &j| p[k + i].total_cmp(&p[k + j]));
            best = Some(CellFit {
                pi: order.iter().map(|&i| pi[i]).collect(),
                mu: order.iter().map(|&i| p[k + i]).collect(),
                beta: order.iter().map(|&i| beta[i]).collect(),
                nll,
            });
        }
    }
    best.ok_or(Error::NonFiniteIntermediate("fit_cell"))
}

/// Fits a per-cell mixture to a set of equally shaped grids. Cells are
/// independent, so restarts are selected cell by cell.
pub fn fit_lm(samples: &[Spectrogram], cfg: &LmFitConfig) -> Result<LaplaceMixtureField> {
    let first = samples.first().ok_or(Error::EmptySample)?;
    let (frames, bins) = first.shape();
    if let Some(bad) = samples.iter().find(|s| s.shape() != (frames, bins)) {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            (frames, bins),
            bad.shape()
        )));
    }
    let root = SeededRng::new(cfg.seed, 0);
    let cells = frames * bins;
    let (mut w, mut m, mut b) = (Vec::new(), Vec::new(), Vec::new());
    let mut ys = vec![0.0; samples.len()];
    for i in 0..cells {
        for (y, s) in ys.iter_mut().zip(samples) {
            *y = f64::from(s.values()[i]);
        }
        let fit = fit_cell(&ys, cfg, &root.substream(i as u64))?;
        w.extend(fit.pi);
        m.extend(fit.mu);
        b.extend(fit.beta);
    }
    // softmax output can drift from the simplex by an ulp; renormalize
    for cell in w.chunks_mut(cfg.k) {
        let s: f64 = cell.iter().sum();
        cell.iter_mut().for_each(|p| *p /= s);
    }
    LaplaceMixtureField::new(cfg.k, frames, bins, w, m, b)
}
