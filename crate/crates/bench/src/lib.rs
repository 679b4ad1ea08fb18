//! Seeded inputs shared by the benchmarks.

use oversmooth::{Grid, SeededRng, Spectrogram};

pub fn noise_grid(rows: usize, cols: usize, seed: u64) -> Grid {
    let mut rng = SeededRng::new(seed, 0);
    Grid::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape matches")
}

pub fn noise_spectrogram(frames: usize, bins: usize, seed: u64) -> Spectrogram {
    noise_grid(frames, bins, seed).to_spectrogram().expect("finite values")
}

/// Equal mix of two unit normals at -3 and +3.
pub fn bimodal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed, 1);
    (0..n).map(|i| rng.normal() + if i % 2 == 0 { -3.0 } else { 3.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_reproducible() {
        assert_eq!(noise_grid(4, 5, 1), noise_grid(4, 5, 1));
        assert_eq!(bimodal(10, 2), bimodal(10, 2));
        assert_eq!(noise_spectrogram(3, 2, 0).shape(), (3, 2));
    }
}
