//! On-disk interchange formats.
//!
//! `MEL1`: the 4-byte magic `MEL1`, `u32` LE frame count, `u32` LE bin
//! count, then `frames * bins` little-endian `f32` values, time-major.
//!
//! Alignment: UTF-8 text, one `label<TAB>start<TAB>end` entry per line with
//! `end` exclusive. Blank lines are ignored.
//!
//! The remaining binary containers (`LMF1`, `FLW1`, `DSC1`) share the same
//! envelope: a 4-byte magic, a run of `u32` LE header fields, then `f32` LE
//! planes. [`Envelope`] reads and writes that shape.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{Alignment, AlignmentEntry, Spectrogram};

pub const MEL_MAGIC: &[u8; 4] = b"MEL1";

pub fn encode_mel(spec: &Spectrogram) -> Vec<u8> {
    let mut env = Envelope::new(*MEL_MAGIC);
    env.push_u32(spec.frames() as u32);
    env.push_u32(spec.bins() as u32);
    env.push_f32s(spec.values());
    env.into_bytes()
}

pub fn decode_mel(bytes: &[u8]) -> Result<Spectrogram> {
    let mut r = EnvelopeReader::new(bytes, MEL_MAGIC)?;
    let frames = r.u32()? as usize;
    let bins = r.u32()? as usize;
    let declared = frames
        .checked_mul(bins)
        .ok_or_else(|| Error::Malformed("frame x bin count overflows".into()))?;
    let actual = r.remaining() / 4;
    if r.remaining() % 4 != 0 || actual != declared {
        return Err(Error::DimensionMismatch { declared, actual });
    }
    let values = r.f32s(declared)?;
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(i));
    }
    Spectrogram::new(frames, bins, values)
}

pub fn write_mel(spec: &Spectrogram, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_mel(spec))?;
    Ok(())
}

pub fn read_mel(path: impl AsRef<Path>) -> Result<Spectrogram> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_mel(&bytes)
}

pub fn parse_alignment(text: &str) -> Result<Alignment> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::AlignmentParse {
                line,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let frame = |s: &str, what: &str| {
            s.trim().parse::<usize>().map_err(|_| Error::AlignmentParse {
                line,
                msg: format!("{what} {s:?} is not a non-negative integer"),
            })
        };
        let start = frame(fields[1], "start")?;
        let end = frame(fields[2], "end")?;
        if start >= end {
            return Err(Error::EmptySpan { line, start, end });
        }
        if let Some(prev) = entries.last().map(|e: &AlignmentEntry| e.end) {
            if start < prev {
                return Err(Error::Overlap {
                    line,
                    start,
                    prev_end: prev,
                });
            }
        }
        entries.push(AlignmentEntry {
            label: fields[0].to_string(),
            start,
            end,
        });
    }
    Alignment::new(entries)
}

pub fn read_alignment(path: impl AsRef<Path>) -> Result<Alignment> {
    parse_alignment(&fs::read_to_string(path)?)
}

pub fn format_alignment(align: &Alignment) -> String {
    let mut out = String::new();
    for e in align.entries() {
        out.push_str(&format!("{}\t{}\t{}\n", e.label, e.start, e.end));
    }
    out
}

/// Builder for magic + `u32` header + `f32` plane containers.
pub struct Envelope {
    buf: Vec<u8>,
}

impl Envelope {
    pub fn new(magic: [u8; 4]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn push_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn push_f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn push_f64s_as_f32(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.buf)?;
        Ok(())
    }
}

pub struct EnvelopeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> EnvelopeReader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found,
            });
        }
        Ok(Self { bytes, pos: 4 })
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f32s_as_f64(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.f32s(n)?.into_iter().map(f64::from).collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Malformed(format!(
                "need {n} more bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_is_header_plus_one_value() {
        let s = Spectrogram::new(1, 1, vec![0.0]).unwrap();
        let bytes = encode_mel(&s);
        // 12-byte header + one f32
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..4], b"MEL1");
        assert_eq!(decode_mel(&bytes).unwrap(), s);
    }

    #[test]
    fn two_by_three_round_trips() {
        let s = Spectrogram::new(2, 3, vec![-1.5, 0.25, 3.0, 1e-7, -0.0, 42.125]).unwrap();
        let back = decode_mel(&encode_mel(&s)).unwrap();
        for (a, b) in s.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_mel(&Spectrogram::new(1, 1, vec![0.0]).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_mel(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn payload_size_mismatch() {
        let mut bytes = encode_mel(&Spectrogram::new(2, 2, vec![0.0; 4]).unwrap());
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode_mel(&bytes),
            Err(Error::DimensionMismatch { declared: 4, actual: 3 })
        ));
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = encode_mel(&Spectrogram::new(1, 2, vec![0.0, 1.0]).unwrap());
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_mel(&bytes), Err(Error::NonFinite(1))));
    }

    #[test]
    fn alignment_two_entries() {
        let a = parse_alignment("AE2\t0\t12\nR\t12\t20").unwrap();
        let spans: Vec<_> = a.entries().iter().map(|e| (e.label.as_str(), e.start, e.end)).collect();
        assert_eq!(spans, vec![("AE2", 0, 12), ("R", 12, 20)]);
    }

    #[test]
    fn alignment_errors() {
        assert!(matches!(parse_alignment("R\t5\t5"), Err(Error::EmptySpan { .. })));
        assert!(matches!(parse_alignment("A\t0\t4\nB\t3\t6"), Err(Error::Overlap { .. })));
        assert!(matches!(
            parse_alignment("A\t0\t4.5"),
            Err(Error::AlignmentParse { line: 1, .. })
        ));
        assert!(matches!(parse_alignment("A\t-1\t4"), Err(Error::AlignmentParse { .. })));
    }

    #[test]
    fn alignment_text_round_trip() {
        let text = "AE2\t0\t12\nR\t12\t20\n";
        assert_eq!(format_alignment(&parse_alignment(text).unwrap()), text);
    }
}
