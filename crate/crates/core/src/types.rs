//! Value types shared by every module: the log-mel [`Spectrogram`], the
//! phoneme [`Alignment`] table, and a plain `f64` [`Grid`] for intermediate
//! results such as filter responses and similarity maps.

use crate::error::{Error, Result};

/// A `frames x bins` grid of log-mel values stored time-major.
///
/// Values are held as IEEE-754 single precision so that the on-disk
/// container round-trips bit-exactly; arithmetic elsewhere widens to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    values: Vec<f32>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, values: Vec<f32>) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("spectrogram needs at least one bin".into()));
        }
        if frames.checked_mul(bins) != Some(values.len()) {
            return Err(Error::DimensionMismatch {
                declared: frames.saturating_mul(bins),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            frames,
            bins,
            values,
        })
    }

    /// Builds from `f64` values, rounding each to single precision.
    pub fn from_f64(frames: usize, bins: usize, values: &[f64]) -> Result<Self> {
        Self::new(frames, bins, values.iter().map(|&v| v as f32).collect())
    }

    pub fn filled(frames: usize, bins: usize, value: f32) -> Result<Self> {
        Self::new(frames, bins, vec![value; frames * bins])
    }

    /// An empty spectrogram with `bins` columns, used for absent phonemes.
    pub fn empty(bins: usize) -> Self {
        Self {
            frames: 0,
            bins,
            values: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        f64::from(self.values[t * self.bins + f])
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn column(&self, f: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.frames).map(move |t| self.get(t, f))
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            rows: self.frames,
            cols: self.bins,
            data: self.values.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                declared: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_spectrogram(&self) -> Result<Spectrogram> {
        Spectrogram::from_f64(self.rows, self.cols, &self.data)
    }
}

/// One phoneme occupying frames `start..end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentEntry {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl AlignmentEntry {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Ordered, non-overlapping phoneme spans over the frames of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    entries: Vec<AlignmentEntry>,
}

impl Alignment {
    /// Validates span ordering. Line numbers in errors are 1-based entry indices.
    pub fn new(entries: Vec<AlignmentEntry>) -> Result<Self> {
        let mut prev_end: Option<usize> = None;
        for (i, e) in entries.iter().enumerate() {
            if e.start >= e.end {
                return Err(Error::EmptySpan {
                    line: i + 1,
                    start: e.start,
                    end: e.end,
                });
            }
            if let Some(p) = prev_end {
                if e.start < p {
                    return Err(Error::Overlap {
                        line: i + 1,
                        start: e.start,
                        prev_end: p,
                    });
                }
            }
            prev_end = Some(e.end);
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[AlignmentEntry] {
        &self.entries
    }

    pub fn spans_of<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a AlignmentEntry> + 'a {
        self.entries.iter().filter(move |e| e.label == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.iter().any(|e| e.label == label)
    }

    /// Last frame index covered, exclusive.
    pub fn end(&self) -> usize {
        self.entries.last().map_or(0, |e| e.end)
    }
}

/// A spectrogram paired with its phoneme alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub spec: Spectrogram,
    pub align: Alignment,
}

/// Copies every frame of `spec` that `align` attributes to `label`, in span
/// order. An absent label yields a zero-frame result.
pub fn gather_phoneme_frames(spec: &Spectrogram, align: &Alignment, label: &str) -> Result<Spectrogram> {
    let mut values = Vec::new();
    let mut frames = 0;
    for e in align.spans_of(label) {
        if e.end > spec.frames() {
            return Err(Error::SpanOutOfRange {
                start: e.start,
                end: e.end,
                frames: spec.frames(),
            });
        }
        values.extend_from_slice(&spec.values()[e.start * spec.bins()..e.end * spec.bins()]);
        frames += e.len();
    }
    if frames == 0 {
        return Ok(Spectrogram::empty(spec.bins()));
    }
    Spectrogram::new(frames, spec.bins(), values)
}
