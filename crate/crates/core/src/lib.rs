//! Measure, analyse and reproduce over-smoothing in predicted spectrograms.
//!
//! The crate bundles a log-mel front end ([`dsp`]), sharpness and similarity
//! metrics ([`metrics`]), per-phoneme density analysis with the dip statistic
//! ([`density`]), the family of training objectives used for spectrogram
//! prediction ([`probloss`], [`flow`], [`gan`]), and a synthetic laboratory
//! ([`toylab`]) where the effect of each modeling assumption can be observed
//! on corpora with known multimodal structure.

pub mod density;
pub mod dsp;
pub mod error;
pub mod flow;
pub mod gan;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod probloss;
pub mod rng;
pub mod toylab;
pub mod types;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use types::{gather_phoneme_frames, Alignment, AlignmentEntry, Grid, Spectrogram, Utterance};
