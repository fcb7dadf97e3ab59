use crate::error::Result;

/// Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
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
    pub fn new(len: usize, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Forgets moments and the step counter.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Gradient at `params + rho * g / |g|`.
///
/// Returns `(g, true)` untouched when `rho` is zero or `g` vanishes.
pub fn sam_gradient(
    params: &[f64],
    g: &[f64],
    rho: f64,
    mut grad_at: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<(Vec<f64>, bool)> {
    let n = super::norm(g);
    if rho == 0.0 || n == 0.0 {
        return Ok((g.to_vec(), true));
    }
    let scale = rho / n;
    let perturbed: Vec<f64> = params.iter().zip(g).map(|(p, d)| p + scale * d).collect();
    Ok((grad_at(&perturbed)?, false))
}
