use oversmooth::metrics::{ssim_grid, ssim_map_grid, var_laplacian_grid, SsimConfig};
use oversmooth::Grid;
use proptest::prelude::*;

fn grid(rows: usize, cols: usize, data: Vec<f64>) -> Grid {
    Grid::from_vec(rows, cols, data).unwrap()
}

fn grids() -> impl Strategy<Value = Grid> {
    (3usize..12, 3usize..12).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| grid(r, c, d))
    })
}

fn transpose(g: &Grid) -> Grid {
    let (r, c) = g.shape();
    grid(c, r, (0..r * c).map(|i| g.get(i % r, i / r)).collect())
}

proptest! {
    #[test]
    fn var_l_is_nonnegative_and_offset_invariant(g in grids(), k in -100.0f64..100.0) {
        let v = var_laplacian_grid(&g).unwrap();
        prop_assert!(v >= 0.0);
        let shifted = grid(g.rows(), g.cols(), g.data().iter().map(|x| x + k).collect());
        let w = var_laplacian_grid(&shifted).unwrap();
        prop_assert!((v - w).abs() <= 1e-9 * v.max(1.0), "{} vs {}", v, w);
    }

    #[test]
    fn var_l_scales_quadratically(g in grids(), a in -4.0f64..4.0) {
        let v = var_laplacian_grid(&g).unwrap();
        let scaled = grid(g.rows(), g.cols(), g.data().iter().map(|x| a * x).collect());
        let w = var_laplacian_grid(&scaled).unwrap();
        prop_assert!((w - a * a * v).abs() <= 1e-9 * w.max(1.0));
    }

    #[test]
    fn var_l_ignores_transposition(g in grids()) {
        let v = var_laplacian_grid(&g).unwrap();
        let w = var_laplacian_grid(&transpose(&g)).unwrap();
        prop_assert!((v - w).abs() <= 1e-12 * v.max(1.0));
    }

    #[test]
    fn ssim_is_bounded_symmetric_and_reflexive(a in grids(), seed in any::<u64>()) {
        let mut rng = oversmooth::SeededRng::new(seed, 0);
        let b = grid(a.rows(), a.cols(), a.data().iter().map(|x| x + rng.normal()).collect());
        let cfg = SsimConfig { window_size: 3, ..SsimConfig::default() };
        let map = ssim_map_grid(&a, &b, &cfg).unwrap();
        prop_assert!(map.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(ssim_grid(&a, &b, &cfg).unwrap(), ssim_grid(&b, &a, &cfg).unwrap());
        prop_assert_eq!(ssim_grid(&a, &a, &cfg).unwrap(), 1.0);
    }
}

#[test]
fn sharpening_raises_var_l() {
    // white noise against its 3x3 box blur
    let (r, c) = (20, 30);
    let mut rng = oversmooth::SeededRng::new(8, 0);
    let sharp = grid(r, c, (0..r * c).map(|_| rng.normal()).collect());
    let blurred = grid(
        r,
        c,
        (0..r * c)
            .map(|i| {
                let (y, x) = ((i / c) as isize, (i % c) as isize);
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let yy = (y + dy).clamp(0, r as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, c as isize - 1) as usize;
                        acc += sharp.get(yy, xx);
                    }
                }
                acc / 9.0
            })
            .collect(),
    );
    let (vs, vb) = (var_laplacian_grid(&sharp).unwrap(), var_laplacian_grid(&blurred).unwrap());
    assert!(vs > 4.0 * vb, "{vs} vs {vb}");
}
