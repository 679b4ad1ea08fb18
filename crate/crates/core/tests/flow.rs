use std::f64::consts::PI;

use nalgebra::DMatrix;
use oversmooth::flow::{random_rotation, train_flow, ConditionedBatch, FlowConfig, FlowModel, FlowTrainConfig};
use oversmooth::{Grid, SeededRng};
use proptest::prelude::*;

fn random_grid(rows: usize, cols: usize, rng: &mut SeededRng) -> Grid {
    Grid::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Initialized model with random actnorm, mixing and coupling weights.
fn random_model(cfg: FlowConfig, seed: u64) -> FlowModel {
    let mut rng = SeededRng::new(seed, 99);
    let mut m = FlowModel::identity(cfg).unwrap();
    for step in m.steps_mut() {
        step.log_scale.iter_mut().for_each(|v| *v = 0.3 * rng.normal());
        step.bias.iter_mut().for_each(|v| *v = 0.3 * rng.normal());
        step.mix = random_rotation(cfg.channels, &mut rng);
        for (i, v) in step.mix.iter_mut().enumerate() {
            *v = *v * 1.2 + if i % (cfg.channels + 1) == 0 { 0.1 } else { 0.05 * rng.normal() };
        }
        for p in [&mut step.w1, &mut step.b1, &mut step.w2, &mut step.b2] {
            p.iter_mut().for_each(|v| *v = 0.5 * rng.normal());
        }
    }
    m
}

fn cfg(channels: usize, steps: usize, hidden: usize, context: usize, cond_dim: usize) -> FlowConfig {
    FlowConfig {
        channels,
        cond_dim,
        steps,
        hidden,
        context,
    }
}

#[test]
fn gradient_matches_central_differences() {
    for (k, c) in [
        cfg(2, 2, 4, 0, 0),
        cfg(2, 2, 4, 1, 1),
        cfg(3, 2, 4, 1, 2),
        cfg(4, 3, 5, 2, 0),
    ]
    .into_iter()
    .enumerate()
    {
        let mut m = random_model(c, k as u64);
        let mut rng = SeededRng::new(k as u64, 1);
        let frames = 2 + k % 2;
        let batch = ConditionedBatch::new(
            (0..3).map(|_| random_grid(frames, c.channels, &mut rng)).collect(),
            (0..3).map(|_| random_grid(frames, c.cond_dim, &mut rng)).collect(),
        )
        .unwrap();
        let (v, g) = m.nll_grad(&batch).unwrap();
        assert!((v - m.nll(&batch).unwrap()).abs() < 1e-10);
        let theta = m.params();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += h;
            m.set_params(&t).unwrap();
            let up = m.nll(&batch).unwrap();
            t[i] -= 2.0 * h;
            m.set_params(&t).unwrap();
            let dn = m.nll(&batch).unwrap();
            m.set_params(&theta).unwrap();
            let numeric = (up - dn) / (2.0 * h);
            let tol = 1e-3 * g[i].abs().max(numeric.abs()).max(1e-5);
            assert!(
                (g[i] - numeric).abs() <= tol,
                "config {k} param {i}: analytic {} numeric {numeric}",
                g[i]
            );
        }
    }
}

#[test]
fn logdet_matches_numeric_jacobian() {
    for (k, (frames, c)) in [(2, 4), (4, 2), (2, 3), (1, 8)].into_iter().enumerate() {
        let model = random_model(cfg(c, 4, 6, 1, 1), 10 + k as u64);
        let mut rng = SeededRng::new(k as u64, 2);
        let z = random_grid(frames, c, &mut rng);
        let cond = random_grid(frames, 1, &mut rng);
        let (_, ld) = model.forward(&z, &cond).unwrap();
        let d = frames * c;
        let h = 1e-6;
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut up = z.clone();
            up.data_mut()[j] += h;
            let mut dn = z.clone();
            dn.data_mut()[j] -= h;
            let yu = model.forward(&up, &cond).unwrap().0;
            let yd = model.forward(&dn, &cond).unwrap().0;
            for i in 0..d {
                jac[(i, j)] = (yu.data()[i] - yd.data()[i]) / (2.0 * h);
            }
        }
        let numeric = jac.determinant().abs().ln();
        assert!(
            (ld - numeric).abs() <= 1e-4 * ld.abs().max(1.0),
            "D={d}: analytic {ld} numeric {numeric}"
        );
    }
}

#[test]
fn forward_and_inverse_logdets_cancel() {
    let model = random_model(cfg(4, 6, 8, 2, 2), 5);
    let mut rng = SeededRng::new(5, 5);
    let z = random_grid(6, 4, &mut rng);
    let cond = random_grid(6, 2, &mut rng);
    let (y, fl) = model.forward(&z, &cond).unwrap();
    let (back, il) = model.inverse(&y, &cond).unwrap();
    assert!((fl + il).abs() < 1e-8);
    let err = back.data().iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9);
}

#[test]
fn scaling_step_change_of_variables() {
    let c = cfg(4, 1, 4, 0, 0);
    let mut scaled = FlowModel::identity(c).unwrap();
    for i in 0..4 {
        scaled.steps_mut()[0].mix[i * 4 + i] = 2.0;
    }
    let ident = FlowModel::identity(c).unwrap();
    let mut rng = SeededRng::new(3, 3);
    let y = random_grid(2, 4, &mut rng);
    let half = Grid::from_vec(2, 4, y.data().iter().map(|v| v / 2.0).collect()).unwrap();
    let none = Grid::zeros(2, 0);
    let lhs = scaled.nll_one(&y, &none).unwrap();
    let rhs = ident.nll_one(&half, &none).unwrap() + 8.0 * 2f64.ln();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn identity_sampling_is_standard_normal() {
    let m = FlowModel::identity(cfg(2, 2, 4, 0, 0)).unwrap();
    let mut rng = SeededRng::new(17, 0);
    let cond = Grid::zeros(1, 0);
    let draws: Vec<Grid> = (0..10_000).map(|_| m.sample(&cond, &mut rng, 1.0).unwrap()).collect();
    for cell in 0..2 {
        let xs: Vec<f64> = draws.iter().map(|g| g.data()[cell]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!(mean.abs() < 0.05 && (0.95..=1.05).contains(&sd), "{mean} {sd}");
    }
    let a = m.sample(&cond, &mut SeededRng::new(4, 4), 1.0).unwrap();
    let b = m.sample(&cond, &mut SeededRng::new(4, 4), 1.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identity_model_nll_of_gaussian_data() {
    let m = FlowModel::identity(cfg(4, 2, 4, 0, 0)).unwrap();
    let mut rng = SeededRng::new(23, 0);
    let batch = ConditionedBatch::unconditioned((0..2000).map(|_| random_grid(2, 4, &mut rng)).collect());
    let per: Vec<f64> = batch
        .targets
        .iter()
        .map(|y| m.nll_one(y, &Grid::zeros(2, 0)).unwrap())
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    let se = (per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per.len() as f64).sqrt()
        / (per.len() as f64).sqrt();
    let expected = 4.0 * (1.0 + (2.0 * PI).ln());
    assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} (se {se})");
}

#[test]
fn low_temperature_collapses_to_latent_origin() {
    let m = random_model(cfg(4, 3, 4, 1, 0), 8);
    let cond = Grid::zeros(3, 0);
    let origin = m.forward(&Grid::zeros(3, 4), &cond).unwrap().0;
    let s = m.sample(&cond, &mut SeededRng::new(1, 1), 1e-9).unwrap();
    let err = s.data().iter().zip(origin.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-7);
}

#[test]
fn gaussian_data_has_nothing_to_learn() {
    let mut rng = SeededRng::new(31, 0);
    let data = ConditionedBatch::unconditioned((0..500).map(|_| random_grid(2, 4, &mut rng)).collect());
    let (model, curve) = train_flow(
        FlowModel::identity(cfg(4, 2, 8, 0, 0)).unwrap(),
        &data,
        &FlowTrainConfig {
            iterations: 200,
            ..Default::default()
        },
    )
    .unwrap();
    let entropy = 4.0 * (1.0 + (2.0 * PI).ln());
    let per_dim = (curve.last() - entropy) / 8.0;
    assert!(per_dim.abs() < 0.05, "{per_dim}");
    assert!(curve.last() <= curve.initial());
    assert_eq!(curve.last(), model.nll(&data).unwrap());
}

#[test]
fn recovers_a_known_generating_flow() {
    let c = cfg(4, 2, 8, 0, 0);
    let mut truth = random_model(c, 77);
    // a clearly non-Gaussian target, bounded scales
    for step in truth.steps_mut() {
        step.w2.iter_mut().for_each(|v| *v *= 2.0);
    }
    let mut rng = SeededRng::new(77, 1);
    let frames = 8;
    let none = Grid::zeros(frames, 0);
    let data = ConditionedBatch::unconditioned(
        (0..2000).map(|_| truth.sample(&none, &mut rng, 1.0).unwrap()).collect(),
    );
    let reference = truth.nll(&data).unwrap();
    let (model, curve) = train_flow(
        FlowModel::new(FlowConfig { steps: 4, ..c }, 3).unwrap(),
        &data,
        &FlowTrainConfig {
            iterations: 1500,
            step_size: 1e-2,
            batch_size: 64,
            eval_every: 100,
            seed: 3,
        },
    )
    .unwrap();
    let d = (frames * 4) as f64;
    let gap = (curve.last() - reference) / d;
    assert!(gap < 0.1, "gap {gap} nats/dim (trained {}, truth {reference})", curve.last());
    assert_eq!(model.nll(&data).unwrap(), curve.last());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_is_tight(seed in 0u64..10_000, steps in 1usize..=16, c in 2usize..=6, frames in 1usize..6) {
        let model = random_model(cfg(c, steps, 8, 1, 1), seed);
        let mut rng = SeededRng::new(seed, 7);
        let z = random_grid(frames, c, &mut rng);
        let cond = random_grid(frames, 1, &mut rng);
        let (y, _) = model.forward(&z, &cond).unwrap();
        let (back, _) = model.inverse(&y, &cond).unwrap();
        let err = back.data().iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "max error {}", err);
    }

    #[test]
    fn appending_identity_step_keeps_nll(seed in 0u64..10_000) {
        let mut model = random_model(cfg(3, 3, 4, 1, 0), seed);
        let mut rng = SeededRng::new(seed, 8);
        let y = random_grid(4, 3, &mut rng);
        let none = Grid::zeros(4, 0);
        let before = model.nll_one(&y, &none).unwrap();
        model.push_identity_step();
        prop_assert_eq!(before, model.nll_one(&y, &none).unwrap());
    }
}
