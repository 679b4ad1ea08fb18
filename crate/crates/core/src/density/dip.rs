//! Hartigan's dip statistic.
//!
//! The dip is the largest distance between the empirical CDF and the
//! closest unimodal CDF. It is computed with the greatest-convex-minorant /
//! least-concave-majorant iteration over the sorted sample (Hartigan &
//! Hartigan, AS 217, with the later index and termination fixes). Work is
//! done in units of `1/(2n)` and the result always lies in `[1/(2n), 1/4]`.
//!
//! Larger values are stronger evidence of multimodality.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DipResult {
    pub dip: f64,
    pub n: usize,
    /// Bounds of the final modal interval, in sample units.
    pub modal_interval: (f64, f64),
}

pub fn dip_statistic(samples: &[f64]) -> Result<DipResult> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (dip2n, lo, hi) = dip_sorted(&sorted);
    Ok(DipResult {
        dip: dip2n / (2 * sorted.len()) as f64,
        n: sorted.len(),
        modal_interval: (sorted[lo - 1], sorted[hi - 1]),
    })
}

/// Returns `2n * dip` and the 1-based modal interval indices.
fn dip_sorted(xs: &[f64]) -> (f64, usize, usize) {
    let n = xs.len();
    let x = |i: usize| xs[i - 1];
    let mut dip = 1.0;
    let (mut low, mut high) = (1usize, n);
    if x(n) == x(1) {
        return (dip, low, high);
    }

    // mn[j]: predecessor of j on the convex minorant of x[1..=j]
    let mut mn = vec![0usize; n + 1];
    mn[1] = 1;
    for j in 2..=n {
        mn[j] = j - 1;
        loop {
            let mnj = mn[j];
            let mnmnj = mn[mnj];
            if mnj == 1
                || (x(j) - x(mnj)) * ((mnj - mnmnj) as f64) < (x(mnj) - x(mnmnj)) * ((j - mnj) as f64)
            {
                break;
            }
            mn[j] = mnmnj;
        }
    }

    // mj[k]: successor of k on the concave majorant of x[k..=n]
    let mut mj = vec![0usize; n + 1];
    mj[n] = n;
    for k in (1..n).rev() {
        mj[k] = k + 1;
        loop {
            let mjk = mj[k];
            let mjmjk = mj[mjk];
            if mjk == n
                || (x(k) - x(mjk)) * (mjk as f64 - mjmjk as f64)
                    < (x(mjk) - x(mjmjk)) * (k as f64 - mjk as f64)
            {
                break;
            }
            mj[k] = mjmjk;
        }
    }

    let mut gcm = vec![0usize; n + 1];
    let mut lcm = vec![0usize; n + 1];
    loop {
        // change points of the GCM from high down to low
        let mut ic = 1;
        gcm[1] = high;
        while gcm[ic] > low {
            let i = gcm[ic];
            ic += 1;
            gcm[ic] = mn[i];
        }
        let l_gcm = ic;

        // change points of the LCM from low up to high
        ic = 1;
        lcm[1] = low;
        while lcm[ic] < high {
            let i = lcm[ic];
            ic += 1;
            lcm[ic] = mj[i];
        }
        let l_lcm = ic;

        // largest GCM/LCM separation inside [low, high]
        let mut ig = l_gcm;
        let mut ih = l_lcm;
        let d = if l_gcm != 2 || l_lcm != 2 {
            let mut d = 0.0;
            let mut ix = l_gcm - 1;
            let mut iv = 2;
            loop {
                let gcmix = gcm[ix];
                let lcmiv = lcm[iv];
                if gcmix > lcmiv {
                    let gcmi1 = gcm[ix + 1];
                    let dx = (lcmiv as f64 - gcmi1 as f64 + 1.0)
                        - (x(lcmiv) - x(gcmi1)) * (gcmix - gcmi1) as f64 / (x(gcmix) - x(gcmi1));
                    iv += 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv - 1;
                    }
                } else {
                    let lcmiv1 = lcm[iv - 1];
                    let dx = (x(gcmix) - x(lcmiv1)) * (lcmiv - lcmiv1) as f64 / (x(lcmiv) - x(lcmiv1))
                        - (gcmix as f64 - lcmiv1 as f64 - 1.0);
                    ix -= 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv;
                    }
                }
                ix = ix.max(1);
                iv = iv.min(l_lcm);
                if gcm[ix] == lcm[iv] {
                    break;
                }
            }
            d
        } else {
            1.0
        };

        if d < dip {
            break;
        }

        // dip of the convex minorant segments
        let mut dip_l: f64 = 0.0;
        for j in ig..l_gcm {
            let (jb, je) = (gcm[j + 1], gcm[j]);
            let mut max_t: f64 = 1.0;
            if je - jb > 1 && x(je) != x(jb) {
                let c = (je - jb) as f64 / (x(je) - x(jb));
                for jj in jb..=je {
                    let t = (jj - jb + 1) as f64 - (x(jj) - x(jb)) * c;
                    max_t = max_t.max(t);
                }
            }
            dip_l = dip_l.max(max_t);
        }

        // dip of the concave majorant segments
        let mut dip_u: f64 = 0.0;
        for j in ih..l_lcm {
            let (jb, je) = (lcm[j], lcm[j + 1]);
            let mut max_t: f64 = 1.0;
            if je - jb > 1 && x(je) != x(jb) {
                let c = (je - jb) as f64 / (x(je) - x(jb));
                for jj in jb..=je {
                    let t = (x(jj) - x(jb)) * c - (jj as f64 - jb as f64 - 1.0);
                    max_t = max_t.max(t);
                }
            }
            dip_u = dip_u.max(max_t);
        }

        dip = dip.max(dip_l.max(dip_u));

        // no movement of the modal interval: converged
        if low == gcm[ig] && high == lcm[ih] {
            break;
        }
        low = gcm[ig];
        high = lcm[ih];
    }
    (dip, low, high)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_give_quarter() {
        assert_eq!(dip_statistic(&[0.0, 1.0]).unwrap().dip, 0.25);
    }

    #[test]
    fn constant_sample_is_minimal() {
        let r = dip_statistic(&[3.0; 10]).unwrap();
        assert_eq!(r.dip, 1.0 / 20.0);
    }

    #[test]
    fn evenly_spaced_is_minimal() {
        let xs: Vec<f64> = (0..50).map(f64::from).collect();
        let r = dip_statistic(&xs).unwrap();
        assert!((r.dip - 1.0 / 100.0).abs() < 1e-12, "{}", r.dip);
    }

    #[test]
    fn two_tight_clusters_approach_quarter() {
        let mut xs: Vec<f64> = (0..50).map(|i| f64::from(i) * 1e-3).collect();
        xs.extend((0..50).map(|i| 10.0 + f64::from(i) * 1e-3));
        let d = dip_statistic(&xs).unwrap().dip;
        assert!(d > 0.24 && d <= 0.25, "{d}");
    }

    #[test]
    fn too_few() {
        assert!(matches!(dip_statistic(&[1.0]), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn order_does_not_matter() {
        let xs = [0.3, -1.2, 4.0, 2.2, 0.0, 0.1, 3.9, 4.1];
        let mut ys = xs;
        ys.reverse();
        assert_eq!(dip_statistic(&xs).unwrap().dip, dip_statistic(&ys).unwrap().dip);
    }
}
