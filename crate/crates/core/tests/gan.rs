use oversmooth::gan::{lsgan_d_loss, lsgan_g_loss, random_windows, TinyDiscriminator, WindowSpec};
use oversmooth::{Grid, SeededRng, Spectrogram};
use proptest::prelude::*;

fn random_disc(width: usize, seed: u64) -> TinyDiscriminator {
    let mut d = TinyDiscriminator::new(width, seed).unwrap();
    let mut rng = SeededRng::new(seed, 1);
    let theta: Vec<f64> = d.params().iter().map(|v| v + 0.3 * rng.normal()).collect();
    d.set_params(&theta).unwrap();
    d
}

fn random_clip(rows: usize, cols: usize, rng: &mut SeededRng) -> Grid {
    Grid::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= 1e-3 * a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn discriminator_gradients_match_central_differences() {
    for (k, (rows, cols)) in [(8, 8), (5, 9), (3, 3)].into_iter().enumerate() {
        let mut d = random_disc(3, k as u64);
        let mut rng = SeededRng::new(k as u64, 2);
        let clip = random_clip(rows, cols, &mut rng);
        let sg = d.score_grad(&clip).unwrap();
        let theta = d.params();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += h;
            d.set_params(&t).unwrap();
            let up = d.score(&clip).unwrap();
            t[i] -= 2.0 * h;
            d.set_params(&t).unwrap();
            let dn = d.score(&clip).unwrap();
            d.set_params(&theta).unwrap();
            let numeric = (up - dn) / (2.0 * h);
            assert!(close(sg.params[i], numeric), "param {i}: {} vs {numeric}", sg.params[i]);
        }
        for i in 0..rows * cols {
            let mut up = clip.clone();
            up.data_mut()[i] += h;
            let mut dn = clip.clone();
            dn.data_mut()[i] -= h;
            let numeric = (d.score(&up).unwrap() - d.score(&dn).unwrap()) / (2.0 * h);
            assert!(close(sg.clip.data()[i], numeric), "cell {i}: {} vs {numeric}", sg.clip.data()[i]);
        }
    }
}

#[test]
fn training_scores_use_dropout_deterministically() {
    let d = random_disc(4, 9);
    let clip = random_clip(8, 8, &mut SeededRng::new(0, 0));
    let a = d.score_train(&clip, &mut SeededRng::new(5, 5)).unwrap();
    let b = d.score_train(&clip, &mut SeededRng::new(5, 5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(d.score(&clip).unwrap(), d.score(&clip).unwrap());
}

#[test]
fn every_frame_is_covered() {
    let spec = Spectrogram::filled(100, 2, 0.0).unwrap();
    let ws = WindowSpec { lengths: [64, 64, 64] };
    let mut rng = SeededRng::new(12, 0);
    let mut seen = vec![false; 100];
    for _ in 0..200 {
        for c in random_windows(&spec, &ws, &mut rng).unwrap() {
            seen[c.offset..c.offset + 64].iter_mut().for_each(|s| *s = true);
        }
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn windows_are_reproducible() {
    let spec = Spectrogram::filled(300, 3, 1.0).unwrap();
    let offs = |seed| {
        let mut rng = SeededRng::new(seed, 4);
        random_windows(&spec, &WindowSpec::default(), &mut rng)
            .unwrap()
            .iter()
            .map(|c| c.offset)
            .collect::<Vec<_>>()
    };
    assert_eq!(offs(3), offs(3));
}

proptest! {
    #[test]
    fn losses_are_nonnegative(real in prop::collection::vec(-3.0f64..3.0, 1..8), fake in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let r = vec![real.clone(), real.clone(), real];
        let f = vec![fake.clone(), fake.clone(), fake];
        prop_assert!(lsgan_d_loss(&r, &f).unwrap() >= 0.0);
        prop_assert!(lsgan_g_loss(&f).unwrap() >= 0.0);
    }

    #[test]
    fn windows_stay_in_bounds(t in 1usize..300, a in 1usize..200, b in 1usize..200, c in 1usize..200, seed in any::<u64>()) {
        let spec = Spectrogram::filled(t, 2, 0.0).unwrap();
        let ws = WindowSpec { lengths: [a, b, c] };
        let clips = random_windows(&spec, &ws, &mut SeededRng::new(seed, 0)).unwrap();
        for (clip, len) in clips.iter().zip([a, b, c]) {
            prop_assert_eq!(clip.spec.frames(), len.min(t));
            prop_assert!(clip.offset + clip.spec.frames() <= t);
        }
    }
}
