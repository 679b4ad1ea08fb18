use oversmooth::probloss::{
    fit_cell, fit_lm, lm_nll, lm_nll_batch, lm_nll_grad, lm_nll_grad_batch, mixture_cdf,
    sample_cell, softplus_inv, LmFitConfig, UnconstrainedMixtureParams, BETA_FLOOR,
};
use oversmooth::{SeededRng, Spectrogram};

fn random_case(rng: &mut SeededRng) -> (UnconstrainedMixtureParams, Spectrogram) {
    let k = 1 + rng.below(4);
    let (frames, bins) = (1 + rng.below(3), 1 + rng.below(3));
    let n = k * frames * bins;
    let mut p = UnconstrainedMixtureParams::zeros(k, frames, bins);
    for i in 0..n {
        p.logits[i] = rng.normal();
        p.means[i] = 2.0 * rng.normal();
        p.raw_scales[i] = rng.normal() - 0.5;
    }
    // keep targets clear of the |y - mu| kink
    let mut ys = Vec::new();
    for c in 0..frames * bins {
        loop {
            let y = 2.0 * rng.normal();
            let y = f64::from(y as f32);
            if p.means[c * k..(c + 1) * k].iter().all(|m| (y - m).abs() > 1e-2) {
                ys.push(y);
                break;
            }
        }
    }
    (p, Spectrogram::from_f64(frames, bins, &ys).unwrap())
}

fn nll_at(p: &UnconstrainedMixtureParams, y: &Spectrogram) -> f64 {
    lm_nll(&p.to_field().unwrap(), y).unwrap()
}

fn plane_mut(p: &mut UnconstrainedMixtureParams, plane: usize) -> &mut Vec<f64> {
    match plane {
        0 => &mut p.logits,
        1 => &mut p.means,
        _ => &mut p.raw_scales,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-3 * a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = SeededRng::new(2024, 0);
    let h = 1e-4;
    for case in 0..100 {
        let (p, y) = random_case(&mut rng);
        let (v, g) = lm_nll_grad(&p, &y).unwrap();
        assert!((v - nll_at(&p, &y)).abs() < 1e-12);
        for plane in 0..3 {
            for i in 0..p.logits.len() {
                let (mut up, mut dn) = (p.clone(), p.clone());
                plane_mut(&mut up, plane)[i] += h;
                plane_mut(&mut dn, plane)[i] -= h;
                let numeric = (nll_at(&up, &y) - nll_at(&dn, &y)) / (2.0 * h);
                let analytic = [&g.logits, &g.means, &g.raw_scales][plane][i];
                assert!(
                    close(analytic, numeric),
                    "case {case} plane {plane} index {i}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
}

#[test]
fn sampler_matches_mixture_cdf() {
    let pi = [0.3, 0.5, 0.2];
    let mu = [-1.5, 0.2, 2.0];
    let beta = [0.4, 0.8, 0.2];
    let mut rng = SeededRng::new(11, 3);
    let mut xs: Vec<f64> = (0..100_000).map(|_| sample_cell(&pi, &mu, &beta, &mut rng)).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = mixture_cdf(&pi, &mu, &beta, x);
            (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS distance {ks}");
}

/// Two-component Laplace EM: weighted medians and weighted mean absolute deviations.
fn em_oracle(ys: &[f64], mut pi: [f64; 2], mut mu: [f64; 2], mut beta: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    for _ in 0..500 {
        let r: Vec<[f64; 2]> = ys
            .iter()
            .map(|&y| {
                let l: Vec<f64> = (0..2)
                    .map(|k| pi[k] * (-(y - mu[k]).abs() / beta[k]).exp() / (2.0 * beta[k]))
                    .collect();
                let s = l[0] + l[1];
                [l[0] / s, l[1] / s]
            })
            .collect();
        for k in 0..2 {
            let w: f64 = r.iter().map(|ri| ri[k]).sum();
            pi[k] = w / ys.len() as f64;
            let mut pairs: Vec<(f64, f64)> = ys.iter().zip(&r).map(|(&y, ri)| (y, ri[k])).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut acc = 0.0;
            for &(y, wi) in &pairs {
                acc += wi;
                if acc >= w / 2.0 {
                    mu[k] = y;
                    break;
                }
            }
            beta[k] = (ys.iter().zip(&r).map(|(&y, ri)| ri[k] * (y - mu[k]).abs()).sum::<f64>() / w)
                .max(BETA_FLOOR);
        }
    }
    (pi, mu)
}

fn two_clusters(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(seed, 0);
    (0..n)
        .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 } + 0.05 * rng.normal())
        .collect()
}

#[test]
fn bimodal_fit_agrees_with_em() {
    let ys = two_clusters(4, 400);
    let cfg = LmFitConfig {
        k: 2,
        ..Default::default()
    };
    let fit = fit_cell(&ys, &cfg, &SeededRng::new(9, 0)).unwrap();
    let (em_pi, em_mu) = em_oracle(&ys, [0.5, 0.5], [-0.5, 0.5], [1.0, 1.0]);
    for k in 0..2 {
        assert!((fit.mu[k] - em_mu[k]).abs() < 0.1, "{:?} vs {:?}", fit.mu, em_mu);
        assert!((fit.pi[k] - em_pi[k]).abs() < 0.1, "{:?} vs {:?}", fit.pi, em_pi);
        assert!((fit.mu[k] - [-1.0, 1.0][k]).abs() < 0.1);
        assert!((fit.pi[k] - 0.5).abs() < 0.1);
    }
    let single = fit_cell(&ys, &LmFitConfig { k: 1, ..cfg }, &SeededRng::new(9, 0)).unwrap();
    assert!(fit.nll <= single.nll - 0.3, "{} vs {}", fit.nll, single.nll);
}

#[test]
fn fit_lm_over_grids_recovers_cells() {
    let mut rng = SeededRng::new(21, 0);
    let samples: Vec<Spectrogram> = (0..200)
        .map(|i| {
            let s = if i % 2 == 0 { -1.0 } else { 1.0 };
            let v: Vec<f64> = (0..4).map(|c| s * (c as f64 + 1.0) + 0.05 * rng.normal()).collect();
            Spectrogram::from_f64(2, 2, &v).unwrap()
        })
        .collect();
    let cfg = LmFitConfig {
        k: 2,
        steps: 300,
        restarts: 3,
        ..Default::default()
    };
    let field = fit_lm(&samples, &cfg).unwrap();
    for c in 0..4 {
        let (_, mu, _) = field.cell(c);
        let m = c as f64 + 1.0;
        assert!((mu[0] + m).abs() < 0.1 && (mu[1] - m).abs() < 0.1, "cell {c}: {mu:?}");
    }
    assert!(lm_nll_batch(&field, &samples).unwrap() < 0.0);
    let again = fit_lm(&samples, &cfg).unwrap();
    assert_eq!(field, again);
}

#[test]
fn stationary_point_has_small_gradient() {
    // K = 1 over {-1, -0.5, 0.5, 1}: any mean in (-0.5, 0.5) balances the signs,
    // and the optimal scale is the mean absolute deviation 0.75
    let ys = [-1.0, -0.5, 0.5, 1.0];
    let targets: Vec<Spectrogram> = ys
        .iter()
        .map(|&y| Spectrogram::from_f64(1, 1, &[y]).unwrap())
        .collect();
    let cfg = LmFitConfig {
        k: 1,
        steps: 3000,
        restarts: 1,
        ..Default::default()
    };
    let fit = fit_cell(&ys, &cfg, &SeededRng::new(0, 0)).unwrap();
    let mut p = UnconstrainedMixtureParams::zeros(1, 1, 1);
    p.means[0] = fit.mu[0];
    p.raw_scales[0] = softplus_inv(fit.beta[0] - BETA_FLOOR);
    let (_, g) = lm_nll_grad_batch(&p, &targets).unwrap();
    let gmax = [g.logits[0], g.means[0], g.raw_scales[0]]
        .iter()
        .fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(gmax < 1e-4, "gradient {g:?} at {fit:?}");
    assert!((fit.beta[0] - 0.75).abs() < 1e-3);
    let expected = (1.5f64).ln() + 1.0;
    assert!((fit.nll - expected).abs() < 1e-6, "{}", fit.nll);
}
