//! Audio front end: PCM16 WAV ingestion, Hann-window STFT magnitudes, an
//! HTK-scale triangular mel filterbank, and natural-log mel spectrograms.
//!
//! Frames are centered on `t * hop` with reflect padding, so a clip of `n`
//! samples yields `ceil(n / hop)` frames.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::types::{Grid, Spectrogram};

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;
pub const DEFAULT_FRAME: usize = 1024;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_MEL_BINS: usize = 80;
pub const DEFAULT_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads a mono 16-bit PCM RIFF/WAVE file, scaling samples by `1/32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} with {} bits per sample",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let declared = reader.len() as usize;
    let mut samples = Vec::with_capacity(declared);
    for s in reader.into_samples::<i16>() {
        samples.push(f64::from(s.map_err(map_hound)?) / 32768.0);
    }
    if samples.len() != declared {
        return Err(Error::Truncated);
    }
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono PCM16 WAV, clamping samples to the representable range.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)?;
    Ok(())
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Truncated,
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(m) => Error::Malformed(m.to_string()),
        hound::Error::Unsupported => Error::UnsupportedFormat("not PCM".into()),
        hound::Error::InvalidSampleFormat => Error::UnsupportedFormat("invalid sample format".into()),
        other => Error::UnsupportedFormat(other.to_string()),
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into a length-`n` signal under whole-sample symmetric reflection
/// (`... x2 x1 | x0 x1 x2 ... x(n-1) | x(n-2) ...`), valid for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}

/// Magnitude STFT as a `frames x (frame_size/2 + 1)` grid.
pub fn stft_magnitude(clip: &AudioClip, frame_size: usize, hop: usize) -> Result<Grid> {
    if frame_size == 0 || hop == 0 {
        return Err(Error::InvalidArgument("frame size and hop must be positive".into()));
    }
    if !frame_size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "frame size {frame_size} is not a power of two"
        )));
    }
    if clip.is_empty() {
        return Err(Error::InvalidArgument("clip is empty".into()));
    }
    let n = clip.len();
    let frames = frame_count(n, hop);
    let n_freq = frame_size / 2 + 1;
    let window = hann(frame_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_size);
    let half = (frame_size / 2) as isize;
    let mut out = Grid::zeros(frames, n_freq);
    let mut buf = vec![Complex::new(0.0, 0.0); frame_size];
    for t in 0..frames {
        let center = (t * hop) as isize;
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(center - half + k as isize, n);
            *slot = Complex::new(clip.samples[idx] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(n_freq).enumerate() {
            out.set(t, k, c.norm());
        }
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Unnormalized triangular filters evenly spaced on the HTK mel scale.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Grid,
    sample_rate: u32,
    n_fft: usize,
    f_min: f64,
    f_max: f64,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Result<Self> {
        if n_mels == 0 || n_fft < 2 {
            return Err(Error::InvalidArgument("need at least one mel bin and n_fft >= 2".into()));
        }
        if !(0.0..f_max).contains(&f_min) || f_max > f64::from(sample_rate) / 2.0 {
            return Err(Error::InvalidArgument(format!(
                "invalid band [{f_min}, {f_max}] for sample rate {sample_rate}"
            )));
        }
        let n_freq = n_fft / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(sample_rate) / n_fft as f64;
        let mut weights = Grid::zeros(n_mels, n_freq);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut any = false;
            for k in 0..n_freq {
                let f = k as f64 * bin_hz;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    any = true;
                    weights.set(m, k, w);
                }
            }
            if !any {
                return Err(Error::InvalidArgument(format!(
                    "mel filter {m} covers no FFT bin; use fewer mel bins or a larger frame"
                )));
            }
        }
        Ok(Self {
            weights,
            sample_rate,
            n_fft,
            f_min,
            f_max,
        })
    }

    /// Filterbank over `[0, sample_rate / 2]`.
    pub fn standard(sample_rate: u32, n_fft: usize, n_mels: usize) -> Result<Self> {
        Self::new(sample_rate, n_fft, n_mels, 0.0, f64::from(sample_rate) / 2.0)
    }

    pub fn weights(&self) -> &Grid {
        &self.weights
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn band(&self) -> (f64, f64) {
        (self.f_min, self.f_max)
    }

    /// Center frequency of each filter in Hz.
    pub fn centers(&self) -> Vec<f64> {
        let (m_lo, m_hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        let n = self.n_mels();
        (1..=n)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n + 1) as f64))
            .collect()
    }

    pub fn apply(&self, magnitude: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self
                .weights
                .row(m)
                .iter()
                .zip(magnitude)
                .map(|(w, x)| w * x)
                .sum();
        }
    }
}

/// Log-mel spectrogram: `ln(max(filterbank · |STFT|, floor))`.
pub fn mel_spectrogram(clip: &AudioClip, fb: &MelFilterbank, hop: usize, floor: f64) -> Result<Spectrogram> {
    if clip.sample_rate() != fb.sample_rate() {
        return Err(Error::RateMismatch {
            expected: fb.sample_rate(),
            actual: clip.sample_rate(),
        });
    }
    if floor <= 0.0 || !floor.is_finite() {
        return Err(Error::InvalidArgument(format!("floor {floor} must be positive")));
    }
    let mag = stft_magnitude(clip, fb.n_fft(), hop)?;
    let bins = fb.n_mels();
    let mut values = Vec::with_capacity(mag.rows() * bins);
    let mut row = vec![0.0; bins];
    for t in 0..mag.rows() {
        fb.apply(mag.row(t), &mut row);
        values.extend(row.iter().map(|&e| e.max(floor).ln()));
    }
    Spectrogram::from_f64(mag.rows(), bins, &values)
}
