//! Adam over a flat parameter vector, shared by the mixture fitter, the flow
//! trainer and the adversarial demo.

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update of `params` against `grad` using step size `lr`.
    pub fn step_with(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let lr = self.lr;
        self.step_with(params, grad, lr);
    }
}

/// Linear decay from `lr` to `lr * floor` over `steps`.
pub fn decayed(lr: f64, step: usize, steps: usize, floor: f64) -> f64 {
    let frac = if steps <= 1 { 0.0 } else { step as f64 / (steps - 1) as f64 };
    lr * (1.0 - (1.0 - floor) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 8.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn decay_endpoints() {
        assert_eq!(decayed(1.0, 0, 11, 0.1), 1.0);
        assert!((decayed(1.0, 10, 11, 0.1) - 0.1).abs() < 1e-15);
    }
}
