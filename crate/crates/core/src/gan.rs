//! Least-squares adversarial losses with three random-window discriminators.
//!
//! Each discriminator is a [`TinyDiscriminator`]: three stride-2 `3x3`
//! convolutions (padding 1), each followed by a per-channel affine
//! normalization and a leaky rectifier, then global mean pooling and an
//! affine map to one score. Dropout after each stage is applied only by
//! [`TinyDiscriminator::score_train`]; evaluation-time scoring is
//! deterministic.
//!
//! `DSC1` checkpoint: magic, `u32` LE stage count, `u32` LE channel width,
//! then the parameters as little-endian `f32` in
//! [`TinyDiscriminator::params`] order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{Envelope, EnvelopeReader};
use crate::rng::SeededRng;
use crate::types::{Grid, Spectrogram};

pub const DSC_MAGIC: &[u8; 4] = b"DSC1";
pub const STAGES: usize = 3;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub lengths: [usize; 3],
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { lengths: [32, 64, 128] }
    }
}

/// A crop of `frames` frames starting at `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub offset: usize,
    pub spec: Spectrogram,
}

/// One clip per window length, each clamped to the input length, with a
/// uniformly drawn start.
pub fn random_windows(spec: &Spectrogram, ws: &WindowSpec, rng: &mut SeededRng) -> Result<Vec<Clip>> {
    if spec.frames() == 0 {
        return Err(Error::InvalidArgument("cannot crop an empty spectrogram".into()));
    }
    if ws.lengths.contains(&0) {
        return Err(Error::InvalidArgument("window lengths must be positive".into()));
    }
    let (t, f) = spec.shape();
    ws.lengths
        .iter()
        .map(|&len| {
            let len = len.min(t);
            let offset = rng.below(t - len + 1);
            let values = spec.values()[offset * f..(offset + len) * f].to_vec();
            Ok(Clip {
                offset,
                spec: Spectrogram::new(len, f, values)?,
            })
        })
        .collect()
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

fn three<'a>(sets: &'a [Vec<f64>], what: &str) -> Result<&'a [Vec<f64>]> {
    if sets.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected 3 {what} score sets, got {}",
            sets.len()
        )));
    }
    Ok(sets)
}

/// `sum_i mean (D_i(real) - 1)^2 + mean D_i(fake)^2`.
pub fn lsgan_d_loss(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (real, fake) = (three(real, "real")?, three(fake, "fake")?);
    let mut total = 0.0;
    for (r, f) in real.iter().zip(fake) {
        let r: Vec<f64> = r.iter().map(|s| (s - 1.0) * (s - 1.0)).collect();
        let f: Vec<f64> = f.iter().map(|s| s * s).collect();
        total += mean(&r)? + mean(&f)?;
    }
    Ok(total)
}

/// `(1/3) sum_i mean (D_i(fake) - 1)^2`.
pub fn lsgan_g_loss(fake: &[Vec<f64>]) -> Result<f64> {
    let fake = three(fake, "fake")?;
    let mut total = 0.0;
    for f in fake {
        let f: Vec<f64> = f.iter().map(|s| (s - 1.0) * (s - 1.0)).collect();
        total += mean(&f)?;
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    cin: usize,
    cout: usize,
    /// `[cout][cin][3][3]`
    w: Vec<f64>,
    b: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDiscriminator {
    width: usize,
    stages: Vec<Stage>,
    out_w: Vec<f64>,
    out_b: f64,
    pub dropout: f64,
}

/// Score plus gradients with respect to parameters and input clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrad {
    pub score: f64,
    pub params: Vec<f64>,
    pub clip: Grid,
}

struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.h + i) * self.w + j]
    }
}

struct StageTrace {
    input: Tensor,
    conv: Vec<f64>,
    mask: Option<Vec<f64>>,
    out_h: usize,
    out_w: usize,
}

fn out_len(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl TinyDiscriminator {
    /// He-style random convolution weights, unit normalization, zero final map.
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidArgument("discriminator width must be positive".into()));
        }
        let mut rng = SeededRng::new(seed, 0x0064_7363);
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let cin = if s == 0 { 1 } else { width };
            let sd = (2.0 / (9 * cin) as f64).sqrt();
            stages.push(Stage {
                cin,
                cout: width,
                w: (0..width * cin * 9).map(|_| sd * rng.normal()).collect(),
                b: vec![0.0; width],
                gamma: vec![1.0; width],
                beta: vec![0.0; width],
            });
        }
        Ok(Self {
            width,
            stages,
            out_w: vec![0.0; width],
            out_b: 0.0,
            dropout: 0.1,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend_from_slice(&s.w);
            out.extend_from_slice(&s.b);
            out.extend_from_slice(&s.gamma);
            out.extend_from_slice(&s.beta);
        }
        out.extend_from_slice(&self.out_w);
        out.push(self.out_b);
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        let need = self.params().len();
        if theta.len() != need {
            return Err(Error::DimensionMismatch {
                declared: need,
                actual: theta.len(),
            });
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&theta[off..off + dst.len()]);
            off += dst.len();
        };
        for s in &mut self.stages {
            take(&mut s.w);
            take(&mut s.b);
            take(&mut s.gamma);
            take(&mut s.beta);
        }
        take(&mut self.out_w);
        self.out_b = theta[need - 1];
        Ok(())
    }

    fn check_clip(clip: &Grid) -> Result<()> {
        if clip.rows() < 3 || clip.cols() < 3 {
            return Err(Error::GridTooSmall {
                frames: clip.rows(),
                bins: clip.cols(),
                min_frames: 3,
                min_bins: 3,
            });
        }
        Ok(())
    }

    fn run(&self, clip: &Grid, mut rng: Option<&mut SeededRng>) -> (Vec<StageTrace>, Tensor, f64) {
        let mut x = Tensor {
            c: 1,
            h: clip.rows(),
            w: clip.cols(),
            data: clip.data().to_vec(),
        };
        let mut traces = Vec::with_capacity(STAGES);
        for st in &self.stages {
            let (oh, ow) = (out_len(x.h), out_len(x.w));
            let mut conv = vec![0.0; st.cout * oh * ow];
            for o in 0..st.cout {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = st.b[o];
                        for ci in 0..st.cin {
                            for di in 0..3 {
                                let r = (2 * i + di) as isize - 1;
                                if r < 0 || r as usize >= x.h {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let c = (2 * j + dj) as isize - 1;
                                    if c < 0 || c as usize >= x.w {
                                        continue;
                                    }
                                    acc += st.w[((o * st.cin + ci) * 3 + di) * 3 + dj]
                                        * x.at(ci, r as usize, c as usize);
                                }
                            }
                        }
                        conv[(o * oh + i) * ow + j] = acc;
                    }
                }
            }
            let mut out = vec![0.0; conv.len()];
            for o in 0..st.cout {
                for p in 0..oh * ow {
                    let n = st.gamma[o] * conv[o * oh * ow + p] + st.beta[o];
                    out[o * oh * ow + p] = if n > 0.0 { n } else { LEAK * n };
                }
            }
            let mask = rng.as_deref_mut().map(|r| {
                let keep = 1.0 - self.dropout;
                (0..out.len())
                    .map(|_| if r.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect::<Vec<f64>>()
            });
            if let Some(m) = &mask {
                out.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            traces.push(StageTrace {
                input: x,
                conv,
                mask,
                out_h: oh,
                out_w: ow,
            });
            x = Tensor {
                c: st.cout,
                h: oh,
                w: ow,
                data: out,
            };
        }
        let area = (x.h * x.w) as f64;
        let mut score = self.out_b;
        for o in 0..x.c {
            let pooled: f64 = x.data[o * x.h * x.w..(o + 1) * x.h * x.w].iter().sum::<f64>() / area;
            score += self.out_w[o] * pooled;
        }
        (traces, x, score)
    }

    /// Evaluation-time score of one clip.
    pub fn score(&self, clip: &Grid) -> Result<f64> {
        Self::check_clip(clip)?;
        Ok(self.run(clip, None).2)
    }

    pub fn score_spec(&self, clip: &Spectrogram) -> Result<f64> {
        self.score(&clip.to_grid())
    }

    /// Evaluation-time score with gradients.
    pub fn score_grad(&self, clip: &Grid) -> Result<ScoreGrad> {
        Self::check_clip(clip)?;
        Ok(self.backward(clip, None))
    }

    /// Training-time score with seeded dropout, and its gradients.
    pub fn score_train(&self, clip: &Grid, rng: &mut SeededRng) -> Result<ScoreGrad> {
        Self::check_clip(clip)?;
        Ok(self.backward(clip, Some(rng)))
    }

    fn backward(&self, clip: &Grid, rng: Option<&mut SeededRng>) -> ScoreGrad {
        let (traces, last, score) = self.run(clip, rng);
        let area = (last.h * last.w) as f64;
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut g_out_w = vec![0.0; last.c];
        // dL/d(stage output)
        let mut g = vec![0.0; last.data.len()];
        for o in 0..last.c {
            let block = o * last.h * last.w..(o + 1) * last.h * last.w;
            g_out_w[o] = last.data[block.clone()].iter().sum::<f64>() / area;
            g[block].iter_mut().for_each(|v| *v = self.out_w[o] / area);
        }
        for (st, tr) in self.stages.iter().zip(&traces).rev() {
            let (oh, ow) = (tr.out_h, tr.out_w);
            let hw = oh * ow;
            if let Some(m) = &tr.mask {
                g.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            let mut gw = vec![0.0; st.w.len()];
            let mut gb = vec![0.0; st.cout];
            let mut ggamma = vec![0.0; st.cout];
            let mut gbeta = vec![0.0; st.cout];
            let mut gconv = vec![0.0; g.len()];
            for o in 0..st.cout {
                for p in 0..hw {
                    let idx = o * hw + p;
                    let n = st.gamma[o] * tr.conv[idx] + st.beta[o];
                    let gn = g[idx] * if n > 0.0 { 1.0 } else { LEAK };
                    ggamma[o] += gn * tr.conv[idx];
                    gbeta[o] += gn;
                    gconv[idx] = gn * st.gamma[o];
                }
            }
            let x = &tr.input;
            let mut gx = vec![0.0; x.data.len()];
            for o in 0..st.cout {
                for i in 0..oh {
                    for j in 0..ow {
                        let gc = gconv[(o * oh + i) * ow + j];
                        if gc == 0.0 {
                            continue;
                        }
                        gb[o] += gc;
                        for ci in 0..st.cin {
                            for di in 0..3 {
                                let r = (2 * i + di) as isize - 1;
                                if r < 0 || r as usize >= x.h {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let c = (2 * j + dj) as isize - 1;
                                    if c < 0 || c as usize >= x.w {
                                        continue;
                                    }
                                    let wi = ((o * st.cin + ci) * 3 + di) * 3 + dj;
                                    let xi = (ci * x.h + r as usize) * x.w + c as usize;
                                    gw[wi] += gc * x.data[xi];
                                    gx[xi] += gc * st.w[wi];
                                }
                            }
                        }
                    }
                }
            }
            let mut block = gw;
            block.extend(gb);
            block.extend(ggamma);
            block.extend(gbeta);
            grads.push(block);
            g = gx;
        }
        let mut params = Vec::new();
        for block in grads.into_iter().rev() {
            params.extend(block);
        }
        params.extend(g_out_w);
        params.push(1.0);
        ScoreGrad {
            score,
            params,
            clip: Grid::from_vec(clip.rows(), clip.cols(), g).expect("input shape"),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut env = Envelope::new(*DSC_MAGIC);
        env.push_u32(STAGES as u32);
        env.push_u32(self.width as u32);
        env.push_f64s_as_f32(&self.params());
        env.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = EnvelopeReader::new(bytes, DSC_MAGIC)?;
        let stages = r.u32()? as usize;
        if stages != STAGES {
            return Err(Error::Malformed(format!("expected {STAGES} stages, found {stages}")));
        }
        let width = r.u32()? as usize;
        let mut d = Self::new(width, 0)?;
        let n = d.params().len();
        if r.remaining() != n * 4 {
            return Err(Error::DimensionMismatch {
                declared: n,
                actual: r.remaining() / 4,
            });
        }
        let theta = r.f32s_as_f64(n)?;
        r.finish()?;
        d.set_params(&theta)?;
        Ok(d)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
