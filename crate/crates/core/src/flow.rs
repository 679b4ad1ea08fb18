//! Conditional normalizing flow over `T x c` grids (frames x channels).
//!
//! A model is a list of steps in data-to-latent order. Going from data to
//! latent (the normalizing direction), each step applies
//!
//! 1. actnorm: `u -> s * u + b` per channel, with `s = exp(log_s)`;
//! 2. channel mixing: `u -> W^-1 u` per frame, where `W` is the matrix of the
//!    generative direction;
//! 3. affine coupling: the first `ceil(c/2)` channels pass unchanged and drive
//!    a small network whose outputs scale and shift the remaining channels,
//!    `u_b -> u_b * exp(l) + m` with `l = 2 tanh(raw / 2)` bounded to (-2, 2).
//!
//! The coupling network sees the first-half channels of frames
//! `t - r ..= t + r` (zero outside the grid) together with the per-frame
//! condition vector, then one tanh hidden layer, then an affine output layer
//! that starts at zero so a fresh step is the identity.
//!
//! `forward` runs latent to data and returns `log |det dy/dz|`; `inverse`
//! runs data to latent and returns `log |det dz/dy|`. The negative
//! log-likelihood of a grid is `0.5 |z|^2 + (D/2) ln 2 pi - log |det dz/dy|`.
//!
//! `FLW1` checkpoint: magic, `u32` LE `K`, `c`, `d_cond`, hidden width,
//! context radius, then every parameter as little-endian `f32` in
//! [`FlowModel::params`] order.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::io::{Envelope, EnvelopeReader};
use crate::optim::{decayed, Adam};
use crate::rng::SeededRng;
use crate::types::Grid;

pub const FLW_MAGIC: &[u8; 4] = b"FLW1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub channels: usize,
    pub cond_dim: usize,
    pub steps: usize,
    pub hidden: usize,
    /// Frames on each side visible to the coupling network.
    pub context: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            cond_dim: 0,
            steps: 8,
            hidden: 16,
            context: 0,
        }
    }
}

impl FlowConfig {
    fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::InvalidArgument("flow needs at least two channels".into()));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidArgument("coupling hidden width must be positive".into()));
        }
        Ok(())
    }

    fn split(&self) -> (usize, usize) {
        let a = self.channels.div_ceil(2);
        (a, self.channels - a)
    }

    fn net_inputs(&self) -> usize {
        (2 * self.context + 1) * self.split().0 + self.cond_dim
    }

    /// Parameter count of one step.
    pub fn step_len(&self) -> usize {
        let c = self.channels;
        let (_, cb) = self.split();
        let (h, n_in) = (self.hidden, self.net_inputs());
        2 * c + c * c + h * n_in + h + 2 * cb * h + 2 * cb
    }
}

/// One actnorm / channel-mix / coupling step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep {
    pub log_scale: Vec<f64>,
    pub bias: Vec<f64>,
    /// Generative-direction mixing matrix, row-major `c x c`.
    pub mix: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Rows `0..cb` produce raw log-scales, rows `cb..2cb` shifts.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl FlowStep {
    fn identity(cfg: &FlowConfig) -> Self {
        let c = cfg.channels;
        let (_, cb) = cfg.split();
        let mut mix = vec![0.0; c * c];
        for i in 0..c {
            mix[i * c + i] = 1.0;
        }
        Self {
            log_scale: vec![0.0; c],
            bias: vec![0.0; c],
            mix,
            w1: vec![0.0; cfg.hidden * cfg.net_inputs()],
            b1: vec![0.0; cfg.hidden],
            w2: vec![0.0; 2 * cb * cfg.hidden],
            b2: vec![0.0; 2 * cb],
        }
    }

    fn planes(&self) -> [&Vec<f64>; 7] {
        [
            &self.log_scale,
            &self.bias,
            &self.mix,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn planes_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.log_scale,
            &mut self.bias,
            &mut self.mix,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Per-frame targets and conditions. Every target is `T_i x c` and its
/// condition grid `T_i x d_cond`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedBatch {
    pub targets: Vec<Grid>,
    pub conditions: Vec<Grid>,
}

impl ConditionedBatch {
    pub fn new(targets: Vec<Grid>, conditions: Vec<Grid>) -> Result<Self> {
        if targets.len() != conditions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets but {} condition grids",
                targets.len(),
                conditions.len()
            )));
        }
        if let Some(first) = targets.first() {
            let c = first.cols();
            let d = conditions[0].cols();
            for (i, (y, x)) in targets.iter().zip(&conditions).enumerate() {
                if y.cols() != c || x.cols() != d || x.rows() != y.rows() {
                    return Err(Error::ShapeMismatch(format!(
                        "item {i}: target {:?}, condition {:?}",
                        y.shape(),
                        x.shape()
                    )));
                }
            }
        }
        Ok(Self { targets, conditions })
    }

    /// Unconditioned batch: zero-width condition grids.
    pub fn unconditioned(targets: Vec<Grid>) -> Self {
        let conditions = targets.iter().map(|y| Grid::zeros(y.rows(), 0)).collect();
        Self { targets, conditions }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            conditions: idx.iter().map(|&i| self.conditions[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    cfg: FlowConfig,
    steps: Vec<FlowStep>,
    initialized: bool,
}

/// Mixing matrix inverse and `ln |det W|` for one step.
struct Prepared {
    inv: Vec<f64>,
    logdet: f64,
}

fn prepare(step: &FlowStep, c: usize, index: usize) -> Result<Prepared> {
    let w = DMatrix::from_row_slice(c, c, &step.mix);
    let lu = w.lu();
    let det = lu.determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::SingularMatrix(index));
    }
    let inv = lu.try_inverse().ok_or(Error::SingularMatrix(index))?;
    let mut flat = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            flat[i * c + j] = inv[(i, j)];
        }
    }
    Ok(Prepared {
        inv: flat,
        logdet: det.abs().ln(),
    })
}

// y[t] = m * x[t] for each frame, m row-major c x c
fn mat_frames(m: &[f64], x: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xt, ot) in x.chunks(c).zip(out.chunks_mut(c)) {
        for i in 0..c {
            let row = &m[i * c..(i + 1) * c];
            ot[i] = row.iter().zip(xt).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Coupling network activations for one grid.
struct NetPass {
    inputs: Vec<f64>,
    hidden: Vec<f64>,
    raw: Vec<f64>,
    shift: Vec<f64>,
}

fn net_forward(cfg: &FlowConfig, step: &FlowStep, x: &[f64], cond: &[f64], frames: usize) -> NetPass {
    let c = cfg.channels;
    let (ca, cb) = cfg.split();
    let n_in = cfg.net_inputs();
    let h = cfg.hidden;
    let r = cfg.context as isize;
    let d = cfg.cond_dim;
    let mut inputs = vec![0.0; frames * n_in];
    let mut hidden = vec![0.0; frames * h];
    let mut raw = vec![0.0; frames * cb];
    let mut shift = vec![0.0; frames * cb];
    for t in 0..frames {
        let inp = &mut inputs[t * n_in..(t + 1) * n_in];
        for (o, dt) in (-r..=r).enumerate() {
            let s = t as isize + dt;
            if s >= 0 && (s as usize) < frames {
                let s = s as usize;
                inp[o * ca..(o + 1) * ca].copy_from_slice(&x[s * c..s * c + ca]);
            }
        }
        inp[n_in - d..].copy_from_slice(&cond[t * d..(t + 1) * d]);
        let hid = &mut hidden[t * h..(t + 1) * h];
        for j in 0..h {
            let row = &step.w1[j * n_in..(j + 1) * n_in];
            let pre: f64 = step.b1[j] + row.iter().zip(inp.iter()).map(|(a, b)| a * b).sum::<f64>();
            hid[j] = pre.tanh();
        }
        for o in 0..2 * cb {
            let row = &step.w2[o * h..(o + 1) * h];
            let v = step.b2[o] + row.iter().zip(hid.iter()).map(|(a, b)| a * b).sum::<f64>();
            if o < cb {
                raw[t * cb + o] = v;
            } else {
                shift[t * cb + o - cb] = v;
            }
        }
    }
    NetPass {
        inputs,
        hidden,
        raw,
        shift,
    }
}

fn bounded(raw: f64) -> f64 {
    2.0 * (0.5 * raw).tanh()
}

/// Activations of one step in the normalizing direction.
struct StepTrace {
    x0: Vec<f64>,
    x1: Vec<f64>,
    x2: Vec<f64>,
    net: NetPass,
}

impl FlowModel {
    /// A fresh model: random rotations for the mixing matrices, random
    /// first coupling layers, zero output layers. Actnorm is left at the
    /// identity until [`FlowModel::actnorm_init`].
    pub fn new(cfg: FlowConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed, 0x666c_6f77);
        let c = cfg.channels;
        let n_in = cfg.net_inputs();
        let mut steps = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let mut step = FlowStep::identity(&cfg);
            step.mix = random_rotation(c, &mut rng);
            let sd = 1.0 / (n_in.max(1) as f64).sqrt();
            step.w1.iter_mut().for_each(|w| *w = sd * rng.normal());
            steps.push(step);
        }
        Ok(Self {
            cfg,
            steps,
            initialized: false,
        })
    }

    /// Every step exactly the identity; counts as initialized.
    pub fn identity(cfg: FlowConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            steps: (0..cfg.steps).map(|_| FlowStep::identity(&cfg)).collect(),
            initialized: true,
        })
    }

    /// Assembles a model from explicit steps, marked initialized.
    pub fn from_steps(cfg: FlowConfig, steps: Vec<FlowStep>) -> Result<Self> {
        cfg.validate()?;
        let mut m = Self::identity(FlowConfig { steps: 0, ..cfg })?;
        m.cfg.steps = steps.len();
        let template = FlowStep::identity(&cfg);
        for s in &steps {
            for (p, q) in s.planes().iter().zip(template.planes()) {
                if p.len() != q.len() {
                    return Err(Error::DimensionMismatch {
                        declared: q.len(),
                        actual: p.len(),
                    });
                }
            }
        }
        m.steps = steps;
        Ok(m)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn steps(&self) -> &[FlowStep] {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut [FlowStep] {
        &mut self.steps
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Appends an exact identity step.
    pub fn push_identity_step(&mut self) {
        self.steps.push(FlowStep::identity(&self.cfg));
        self.cfg.steps += 1;
    }

    pub fn dim_check(&self, y: &Grid, cond: &Grid) -> Result<()> {
        if y.cols() != self.cfg.channels {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} channels, model expects {}",
                y.cols(),
                self.cfg.channels
            )));
        }
        if cond.cols() != self.cfg.cond_dim || cond.rows() != y.rows() {
            return Err(Error::ShapeMismatch(format!(
                "condition {:?} for a {}-frame grid, model expects width {}",
                cond.shape(),
                y.rows(),
                self.cfg.cond_dim
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &ConditionedBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptySample);
        }
        for (y, x) in batch.targets.iter().zip(&batch.conditions) {
            self.dim_check(y, x)?;
        }
        Ok(())
    }

    fn prepared(&self) -> Result<Vec<Prepared>> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| prepare(s, self.cfg.channels, i))
            .collect()
    }

    /// Data-dependent actnorm initialization: each step's actnorm is set so
    /// that its output over `batch` has zero mean and unit variance per
    /// channel, steps initialized in data-to-latent order.
    pub fn actnorm_init(&mut self, batch: &ConditionedBatch) -> Result<()> {
        if self.initialized {
            return Err(Error::AlreadyInitialized);
        }
        self.check_batch(batch)?;
        let c = self.cfg.channels;
        let prep = self.prepared()?;
        let mut xs: Vec<Vec<f64>> = batch.targets.iter().map(|g| g.data().to_vec()).collect();
        for (k, p) in prep.iter().enumerate() {
            let mut sum = vec![0.0; c];
            let mut count = 0usize;
            for x in &xs {
                for xt in x.chunks(c) {
                    for i in 0..c {
                        sum[i] += xt[i];
                    }
                    count += 1;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut var = vec![0.0; c];
            for x in &xs {
                for xt in x.chunks(c) {
                    for i in 0..c {
                        var[i] += (xt[i] - mean[i]).powi(2);
                    }
                }
            }
            let step = &mut self.steps[k];
            for i in 0..c {
                let sd = (var[i] / count as f64).sqrt();
                if !(sd > 1e-12 * (1.0 + mean[i].abs())) {
                    return Err(Error::DegenerateChannel(i));
                }
                step.log_scale[i] = -sd.ln();
                step.bias[i] = -mean[i] / sd;
            }
            let step = &self.steps[k];
            for (x, cond) in xs.iter_mut().zip(&batch.conditions) {
                let frames = x.len() / c;
                *x = self.step_normalize(step, p, x, cond.data(), frames).0;
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// One step data-to-latent; returns output and log-determinant.
    fn step_normalize(&self, step: &FlowStep, p: &Prepared, x: &[f64], cond: &[f64], frames: usize) -> (Vec<f64>, f64) {
        let tr = self.step_trace(step, p, x, cond, frames);
        let (out, ld) = coupling_apply(&self.cfg, &tr.x2, &tr.net, frames);
        let act_ld: f64 = frames as f64 * step.log_scale.iter().sum::<f64>();
        (out, ld + act_ld - frames as f64 * p.logdet)
    }

    fn step_trace(&self, step: &FlowStep, p: &Prepared, x: &[f64], cond: &[f64], frames: usize) -> StepTrace {
        let c = self.cfg.channels;
        let mut x1 = x.to_vec();
        for xt in x1.chunks_mut(c) {
            for i in 0..c {
                xt[i] = step.log_scale[i].exp() * xt[i] + step.bias[i];
            }
        }
        let x2 = mat_frames(&p.inv, &x1, c);
        let net = net_forward(&self.cfg, step, &x2, cond, frames);
        StepTrace {
            x0: x.to_vec(),
            x1,
            x2,
            net,
        }
    }

    /// Data to latent. Returns `z` and `log |det dz/dy|`.
    pub fn inverse(&self, y: &Grid, cond: &Grid) -> Result<(Grid, f64)> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        self.dim_check(y, cond)?;
        let prep = self.prepared()?;
        let frames = y.rows();
        let mut x = y.data().to_vec();
        let mut logdet = 0.0;
        for (step, p) in self.steps.iter().zip(&prep) {
            let (nx, ld) = self.step_normalize(step, p, &x, cond.data(), frames);
            x = nx;
            logdet += ld;
        }
        Ok((Grid::from_vec(frames, self.cfg.channels, x)?, logdet))
    }

    /// Latent to data. Returns `y` and `log |det dy/dz|`.
    pub fn forward(&self, z: &Grid, cond: &Grid) -> Result<(Grid, f64)> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        self.dim_check(z, cond)?;
        let prep = self.prepared()?;
        let c = self.cfg.channels;
        let (ca, cb) = self.cfg.split();
        let frames = z.rows();
        let mut x = z.data().to_vec();
        let mut logdet = 0.0;
        for (step, p) in self.steps.iter().zip(&prep).rev() {
            // coupling: the first half is unchanged, so the network sees the same inputs
            let net = net_forward(&self.cfg, step, &x, cond.data(), frames);
            for t in 0..frames {
                for j in 0..cb {
                    let l = bounded(net.raw[t * cb + j]);
                    let v = &mut x[t * c + ca + j];
                    *v = (*v - net.shift[t * cb + j]) * (-l).exp();
                    logdet -= l;
                }
            }
            x = mat_frames(&step.mix, &x, c);
            logdet += frames as f64 * p.logdet;
            for xt in x.chunks_mut(c) {
                for i in 0..c {
                    xt[i] = (xt[i] - step.bias[i]) * (-step.log_scale[i]).exp();
                }
            }
            logdet -= frames as f64 * step.log_scale.iter().sum::<f64>();
        }
        Ok((Grid::from_vec(frames, c, x)?, logdet))
    }

    /// Negative log-likelihood of one grid, in nats.
    pub fn nll_one(&self, y: &Grid, cond: &Grid) -> Result<f64> {
        let (z, logdet) = self.inverse(y, cond)?;
        let d = z.data().len() as f64;
        let sq: f64 = z.data().iter().map(|v| v * v).sum();
        Ok(0.5 * sq + 0.5 * d * (2.0 * PI).ln() - logdet)
    }

    /// Mean negative log-likelihood over the batch, in nats per grid.
    pub fn nll(&self, batch: &ConditionedBatch) -> Result<f64> {
        self.check_batch(batch)?;
        let mut total = 0.0;
        for (y, x) in batch.targets.iter().zip(&batch.conditions) {
            total += self.nll_one(y, x)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// [`FlowModel::nll`] and its gradient in [`FlowModel::params`] order.
    pub fn nll_grad(&self, batch: &ConditionedBatch) -> Result<(f64, Vec<f64>)> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        self.check_batch(batch)?;
        let prep = self.prepared()?;
        let cfg = &self.cfg;
        let c = cfg.channels;
        let (ca, cb) = cfg.split();
        let (h, n_in) = (cfg.hidden, cfg.net_inputs());
        let r = cfg.context as isize;
        let step_len = cfg.step_len();
        let mut grad = vec![0.0; step_len * self.steps.len()];
        let mut total = 0.0;
        for (y, cond) in batch.targets.iter().zip(&batch.conditions) {
            let frames = y.rows();
            let mut x = y.data().to_vec();
            let mut traces = Vec::with_capacity(self.steps.len());
            let mut logdet = 0.0;
            for (step, p) in self.steps.iter().zip(&prep) {
                let tr = self.step_trace(step, p, &x, cond.data(), frames);
                let (out, ld) = coupling_apply(cfg, &tr.x2, &tr.net, frames);
                logdet += ld + frames as f64 * (step.log_scale.iter().sum::<f64>() - p.logdet);
                x = out;
                traces.push(tr);
            }
            let d = x.len() as f64;
            total += 0.5 * x.iter().map(|v| v * v).sum::<f64>() + 0.5 * d * (2.0 * PI).ln() - logdet;

            // g: dL/d(activation), starting at z
            let mut g = x;
            for (k, (step, p)) in self.steps.iter().zip(&prep).enumerate().rev() {
                let tr = &traces[k];
                let gs = &mut grad[k * step_len..(k + 1) * step_len];
                let (g_ls, rest) = gs.split_at_mut(c);
                let (g_b, rest) = rest.split_at_mut(c);
                let (g_mix, rest) = rest.split_at_mut(c * c);
                let (g_w1, rest) = rest.split_at_mut(h * n_in);
                let (g_b1, rest) = rest.split_at_mut(h);
                let (g_w2, g_b2) = rest.split_at_mut(2 * cb * h);

                // coupling
                let mut g2 = g.clone();
                let mut g_in = vec![0.0; n_in];
                for t in 0..frames {
                    let mut dout = vec![0.0; 2 * cb];
                    for j in 0..cb {
                        let raw = tr.net.raw[t * cb + j];
                        let th = (0.5 * raw).tanh();
                        let e = (2.0 * th).exp();
                        let gy = g[t * c + ca + j];
                        g2[t * c + ca + j] = gy * e;
                        let dl = gy * tr.x2[t * c + ca + j] * e - 1.0;
                        dout[j] = dl * (1.0 - th * th);
                        dout[cb + j] = gy;
                    }
                    let hid = &tr.net.hidden[t * h..(t + 1) * h];
                    let inp = &tr.net.inputs[t * n_in..(t + 1) * n_in];
                    let mut dh = vec![0.0; h];
                    for o in 0..2 * cb {
                        if dout[o] == 0.0 {
                            continue;
                        }
                        g_b2[o] += dout[o];
                        for j in 0..h {
                            g_w2[o * h + j] += dout[o] * hid[j];
                            dh[j] += step.w2[o * h + j] * dout[o];
                        }
                    }
                    g_in.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..h {
                        let dp = dh[j] * (1.0 - hid[j] * hid[j]);
                        if dp == 0.0 {
                            continue;
                        }
                        g_b1[j] += dp;
                        let row = &step.w1[j * n_in..(j + 1) * n_in];
                        let grow = &mut g_w1[j * n_in..(j + 1) * n_in];
                        for i in 0..n_in {
                            grow[i] += dp * inp[i];
                            g_in[i] += row[i] * dp;
                        }
                    }
                    for (o, dt) in (-r..=r).enumerate() {
                        let s = t as isize + dt;
                        if s >= 0 && (s as usize) < frames {
                            let s = s as usize;
                            for i in 0..ca {
                                g2[s * c + i] += g_in[o * ca + i];
                            }
                        }
                    }
                }

                // channel mix: x2 = V x1, L += T ln|det W|
                let v = &p.inv;
                let mut gv = vec![0.0; c * c];
                for t in 0..frames {
                    for i in 0..c {
                        for j in 0..c {
                            gv[i * c + j] += g2[t * c + i] * tr.x1[t * c + j];
                        }
                    }
                }
                // dL/dW = -V^T G V^T + T V^T
                let mut vt_g = vec![0.0; c * c];
                for i in 0..c {
                    for j in 0..c {
                        vt_g[i * c + j] = (0..c).map(|m| v[m * c + i] * gv[m * c + j]).sum();
                    }
                }
                for i in 0..c {
                    for j in 0..c {
                        let a: f64 = (0..c).map(|m| vt_g[i * c + m] * v[j * c + m]).sum();
                        g_mix[i * c + j] += -a + frames as f64 * v[j * c + i];
                    }
                }
                let mut g1 = vec![0.0; frames * c];
                for t in 0..frames {
                    for j in 0..c {
                        g1[t * c + j] = (0..c).map(|i| v[i * c + j] * g2[t * c + i]).sum();
                    }
                }

                // actnorm: x1 = e^ls x0 + b, L -= T sum ls
                let mut g0 = g1.clone();
                for t in 0..frames {
                    for i in 0..c {
                        let s = step.log_scale[i].exp();
                        g_b[i] += g1[t * c + i];
                        g_ls[i] += g1[t * c + i] * tr.x0[t * c + i] * s;
                        g0[t * c + i] = g1[t * c + i] * s;
                    }
                }
                for i in 0..c {
                    g_ls[i] -= frames as f64;
                }
                g = g0;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        let value = total / n;
        if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIntermediate("flow nll gradient"));
        }
        Ok((value, grad))
    }

    /// All parameters, step by step: log-scales, biases, mixing matrix,
    /// coupling `w1`, `b1`, `w2`, `b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cfg.step_len() * self.steps.len());
        for s in &self.steps {
            for p in s.planes() {
                out.extend_from_slice(p);
            }
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        let need = self.cfg.step_len() * self.steps.len();
        if theta.len() != need {
            return Err(Error::DimensionMismatch {
                declared: need,
                actual: theta.len(),
            });
        }
        let mut off = 0;
        for s in &mut self.steps {
            for p in s.planes_mut() {
                let n = p.len();
                p.copy_from_slice(&theta[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Rounds every parameter to single precision, matching a checkpoint.
    pub fn round_to_f32(&mut self) {
        let theta: Vec<f64> = self.params().iter().map(|&v| f64::from(v as f32)).collect();
        self.set_params(&theta).expect("same length");
    }

    /// Draws `z ~ N(0, tau^2 I)` and maps it to data.
    pub fn sample(&self, cond: &Grid, rng: &mut SeededRng, tau: f64) -> Result<Grid> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
        }
        let frames = cond.rows();
        let z: Vec<f64> = (0..frames * self.cfg.channels).map(|_| tau * rng.normal()).collect();
        Ok(self.forward(&Grid::from_vec(frames, self.cfg.channels, z)?, cond)?.0)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let mut env = Envelope::new(*FLW_MAGIC);
        for v in [
            self.steps.len(),
            self.cfg.channels,
            self.cfg.cond_dim,
            self.cfg.hidden,
            self.cfg.context,
        ] {
            env.push_u32(v as u32);
        }
        env.push_f64s_as_f32(&self.params());
        Ok(env.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = EnvelopeReader::new(bytes, FLW_MAGIC)?;
        let steps = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let cond_dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let context = r.u32()? as usize;
        let cfg = FlowConfig {
            channels,
            cond_dim,
            steps,
            hidden,
            context,
        };
        cfg.validate()?;
        let need = cfg.step_len() * steps;
        if r.remaining() != need * 4 {
            return Err(Error::DimensionMismatch {
                declared: need,
                actual: r.remaining() / 4,
            });
        }
        let theta = r.f32s_as_f64(need)?;
        r.finish()?;
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mut m = Self::identity(cfg)?;
        m.set_params(&theta)?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Applies the coupling given precomputed network outputs; returns output
/// and `sum l`.
fn coupling_apply(cfg: &FlowConfig, x2: &[f64], net: &NetPass, frames: usize) -> (Vec<f64>, f64) {
    let c = cfg.channels;
    let (ca, cb) = cfg.split();
    let mut out = x2.to_vec();
    let mut ld = 0.0;
    for t in 0..frames {
        for j in 0..cb {
            let l = bounded(net.raw[t * cb + j]);
            let v = &mut out[t * c + ca + j];
            *v = *v * l.exp() + net.shift[t * cb + j];
            ld += l;
        }
    }
    (out, ld)
}

/// Uniformly random `c x c` rotation (orthogonal, determinant +1).
pub fn random_rotation(c: usize, rng: &mut SeededRng) -> Vec<f64> {
    let a = DMatrix::from_fn(c, c, |_, _| rng.normal());
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // sign fix makes the distribution Haar
    for j in 0..c {
        if r[(j, j)] < 0.0 {
            for i in 0..c {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    if q.determinant() < 0.0 {
        for i in 0..c {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    let mut flat = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            flat[i * c + j] = q[(i, j)];
        }
    }
    flat
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTrainConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub batch_size: usize,
    /// Full-data NLL is evaluated every this many iterations.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            step_size: 5e-3,
            batch_size: 64,
            eval_every: 50,
            seed: 0,
        }
    }
}

/// `(iteration, full-data NLL in nats per grid)` pairs. The first entry is
/// the freshly initialized model; the last is the returned model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingCurve {
    pub points: Vec<(usize, f64)>,
}

impl TrainingCurve {
    pub fn initial(&self) -> f64 {
        self.points.first().map_or(f64::NAN, |p| p.1)
    }

    pub fn last(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,nll\n");
        for (s, v) in &self.points {
            let _ = writeln!(out, "{s},{v}");
        }
        out
    }
}

/// Minibatch Adam on the NLL. Actnorm is initialized from the first
/// minibatch when `model` is not yet initialized. The returned parameters
/// are the best full-data evaluation seen, rounded to single precision.
pub fn train_flow(
    mut model: FlowModel,
    data: &ConditionedBatch,
    cfg: &FlowTrainConfig,
) -> Result<(FlowModel, TrainingCurve)> {
    if data.is_empty() {
        return Err(Error::EmptySample);
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::InvalidArgument("batch size and eval interval must be positive".into()));
    }
    let mut rng = SeededRng::new(cfg.seed, 0x0074_7261_696e);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    let mut cursor = 0;
    let mut next_batch = |rng: &mut SeededRng| -> Vec<usize> {
        let mut idx = Vec::with_capacity(cfg.batch_size.min(n));
        while idx.len() < cfg.batch_size.min(n) {
            if cursor == n {
                shuffle(&mut order, rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        idx
    };
    if !model.is_initialized() {
        let first = data.subset(&next_batch(&mut rng));
        model.actnorm_init(&first)?;
    }
    model.round_to_f32();
    let mut curve = TrainingCurve::default();
    let start = model.params();
    let mut best = (model.nll(data)?, start.clone());
    curve.points.push((0, best.0));
    let mut theta = model.params();
    let mut opt = Adam::new(theta.len(), cfg.step_size);
    for it in 1..=cfg.iterations {
        let mb = data.subset(&next_batch(&mut rng));
        let (loss, g) = match model.nll_grad(&mb) {
            Ok(v) => v,
            Err(Error::NonFiniteIntermediate(_)) => {
                return Err(Error::Diverged {
                    step: it,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step: it, loss });
        }
        opt.step_with(&mut theta, &g, decayed(cfg.step_size, it - 1, cfg.iterations, 0.1));
        model.set_params(&theta)?;
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let v = match model.nll(data) {
                Ok(v) => v,
                Err(Error::SingularMatrix(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if !v.is_finite() {
                return Err(Error::Diverged { step: it, loss: v });
            }
            if v < best.0 {
                best = (v, theta.clone());
            }
        }
    }
    model.set_params(&best.1)?;
    model.round_to_f32();
    let mut last = model.nll(data)?;
    if last > curve.initial() {
        // rounding undid a sub-ulp improvement; keep the starting point
        model.set_params(&start)?;
        last = curve.initial();
    }
    curve.points.push((cfg.iterations, last));
    Ok((model, curve))
}

fn shuffle(v: &mut [usize], rng: &mut SeededRng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, steps: usize) -> FlowConfig {
        FlowConfig {
            channels: c,
            cond_dim: 0,
            steps,
            hidden: 4,
            context: 0,
        }
    }

    #[test]
    fn identity_is_identity() {
        let m = FlowModel::identity(cfg(4, 3)).unwrap();
        let z = Grid::from_vec(2, 4, (0..8).map(f64::from).collect()).unwrap();
        let (y, ld) = m.forward(&z, &Grid::zeros(2, 0)).unwrap();
        assert_eq!(y, z);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn doubling_mix_logdet() {
        let mut m = FlowModel::identity(cfg(4, 1)).unwrap();
        for i in 0..4 {
            m.steps_mut()[0].mix[i * 4 + i] = 2.0;
        }
        let z = Grid::from_vec(10, 4, vec![0.5; 40]).unwrap();
        let cond = Grid::zeros(10, 0);
        let (y, ld) = m.forward(&z, &cond).unwrap();
        assert!((ld - 40.0 * 2f64.ln()).abs() < 1e-12);
        assert!(y.data().iter().all(|&v| v == 1.0));
        let (back, ild) = m.inverse(&y, &cond).unwrap();
        assert_eq!(back, z);
        assert!((ild + 40.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_nll_at_zero() {
        let m = FlowModel::identity(cfg(4, 2)).unwrap();
        let v = m.nll_one(&Grid::zeros(2, 4), &Grid::zeros(2, 0)).unwrap();
        assert!((v - 4.0 * (2.0 * PI).ln()).abs() < 1e-9);
    }

    #[test]
    fn uninitialized_refuses() {
        let m = FlowModel::new(cfg(4, 2), 0).unwrap();
        assert!(matches!(
            m.forward(&Grid::zeros(2, 4), &Grid::zeros(2, 0)),
            Err(Error::Uninitialized)
        ));
    }

    #[test]
    fn rotation_has_unit_determinant() {
        let mut rng = SeededRng::new(3, 0);
        for c in 2..8 {
            let q = random_rotation(c, &mut rng);
            let d = DMatrix::from_row_slice(c, c, &q).determinant();
            assert!((d - 1.0).abs() < 1e-12, "{d}");
        }
    }

    #[test]
    fn actnorm_init_standardizes() {
        let mut rng = SeededRng::new(8, 0);
        let targets: Vec<Grid> = (0..50)
            .map(|_| {
                let v = (0..12).map(|_| 5.0 + 2.0 * rng.normal()).collect();
                Grid::from_vec(3, 4, v).unwrap()
            })
            .collect();
        let batch = ConditionedBatch::unconditioned(targets);
        let mut m = FlowModel::new(cfg(4, 2), 1).unwrap();
        m.actnorm_init(&batch).unwrap();
        let s = &m.steps()[0];
        for i in 0..4 {
            let mut xs = Vec::new();
            for y in &batch.targets {
                for t in 0..3 {
                    xs.push(s.log_scale[i].exp() * y.get(t, i) + s.bias[i]);
                }
            }
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!(mean.abs() < 1e-5 && (sd - 1.0).abs() < 1e-3);
            assert!((s.log_scale[i].exp() - 0.5).abs() < 0.1);
            assert!((s.bias[i] + 2.5).abs() < 0.4);
        }
        assert!(matches!(m.actnorm_init(&batch), Err(Error::AlreadyInitialized)));
    }

    #[test]
    fn constant_channel_rejected() {
        let targets = vec![Grid::from_vec(2, 2, vec![1.0, 0.0, 1.0, 3.0]).unwrap(); 1];
        let mut m = FlowModel::new(cfg(2, 1), 1).unwrap();
        assert!(matches!(
            m.actnorm_init(&ConditionedBatch::unconditioned(targets)),
            Err(Error::DegenerateChannel(0))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = FlowModel::new(FlowConfig { context: 1, cond_dim: 2, ..cfg(3, 2) }, 4).unwrap();
        let batch = ConditionedBatch::new(
            vec![Grid::from_vec(2, 3, vec![0.0, 1.0, 2.0, 1.0, -1.0, 0.5]).unwrap()],
            vec![Grid::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()],
        )
        .unwrap();
        m.actnorm_init(&batch).unwrap();
        m.round_to_f32();
        let back = FlowModel::decode(&m.encode().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
