use serde::{Deserialize, Serialize};

use super::svd::jacobi_svd;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Which singular values stay trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Largest singular values (lowest indices at decomposition time).
    Top,
    /// Smallest singular values.
    Bottom,
    #[default]
    All,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Self::Top),
            "bottom" => Ok(Self::Bottom),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidArgument(format!("unknown mask strategy `{other}`"))),
        }
    }
}

/// Number of trainable entries for a `percent` selection out of `rank`.
pub fn masked_count(rank: usize, percent: f64) -> usize {
    // integer-valued percentages must not pick up an extra entry from rounding
    let exact = percent * rank as f64 / 100.0;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(rank)
}

/// A linear map `x -> U diag(sigma) V^T x + bias` with frozen `U`, `V`
/// and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralLayer<T> {
    u: Tensor<T>,
    sigma: Tensor<T>,
    v: Tensor<T>,
    bias: Tensor<T>,
    mask: Option<Vec<bool>>,
}

/// Graph handles for one application of a spectral layer.
#[derive(Clone, Copy, Debug)]
pub struct SpectralBinding {
    pub u: Var,
    pub sigma: Var,
    pub v: Var,
    pub bias: Var,
}

impl<T: Real> SpectralLayer<T> {
    /// Factorizes `weight` (`d_out x d_in`). The decomposition runs in
    /// double precision regardless of `T`.
    pub fn decompose(weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Self> {
        let shape = weight.shape();
        if shape.len() != 2 {
            return Err(Error::shape("decompose", shape, &[]));
        }
        let (d_out, d_in) = (shape[0], shape[1]);
        if bias.shape() != [d_out] {
            return Err(Error::shape("decompose (bias)", shape, bias.shape()));
        }
        let svd = jacobi_svd(&weight.to_f64_vec(), d_out, d_in)?;
        let r = svd.rank();
        Ok(Self {
            u: Tensor::from_f64([d_out, r], &svd.u)?,
            sigma: Tensor::from_f64([r], &svd.s)?,
            v: Tensor::from_f64([d_in, r], &svd.v)?,
            bias: bias.clone().with_requires_grad(false),
            mask: None,
        })
    }

    /// Assembles a layer from explicit factors.
    pub fn from_parts(u: Tensor<T>, sigma: Tensor<T>, v: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (us, ss, vs) = (u.shape(), sigma.shape(), v.shape());
        if us.len() != 2 || vs.len() != 2 || ss.len() != 1 || us[1] != ss[0] || vs[1] != ss[0] {
            return Err(Error::shape("spectral parts", us, vs));
        }
        if bias.shape() != [us[0]] {
            return Err(Error::shape("spectral bias", us, bias.shape()));
        }
        Ok(Self {
            u: u.with_requires_grad(false),
            sigma,
            v: v.with_requires_grad(false),
            bias: bias.with_requires_grad(false),
            mask: None,
        })
    }

    pub fn rank(&self) -> usize {
        self.sigma.numel()
    }

    pub fn d_out(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn u(&self) -> &Tensor<T> {
        &self.u
    }

    pub fn v(&self) -> &Tensor<T> {
        &self.v
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn sigma(&self) -> &Tensor<T> {
        &self.sigma
    }

    pub fn sigma_mut(&mut self) -> &mut Tensor<T> {
        &mut self.sigma
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Whether entry `i` of sigma may be updated.
    pub fn is_trainable_entry(&self, i: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[i])
    }

    pub fn trainable_count(&self) -> usize {
        self.mask.as_ref().map_or(self.rank(), |m| m.iter().filter(|b| **b).count())
    }

    /// Restricts training to a top/bottom `percent` of the spectrum.
    pub fn set_mask(&mut self, strategy: MaskStrategy, percent: f64) -> Result<()> {
        if !(percent > 0.0 && percent <= 100.0) {
            return Err(Error::InvalidArgument(format!("mask percentage {percent} outside (0, 100]")));
        }
        let r = self.rank();
        let k = masked_count(r, percent);
        self.mask = match strategy {
            MaskStrategy::All => None,
            MaskStrategy::Top => Some((0..r).map(|i| i < k).collect()),
            MaskStrategy::Bottom => Some((0..r).map(|i| i >= r - k).collect()),
        };
        Ok(())
    }

    /// Installs an explicit mask of length `rank`.
    pub fn set_mask_vec(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.rank() {
            return Err(Error::shape("set_mask_vec", &[self.rank()], &[mask.len()]));
        }
        self.mask = Some(mask);
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    /// Dense `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Tensor<T> {
        let (d_out, r) = (self.d_out(), self.rank());
        let s = self.sigma.data();
        let mut us = self.u.clone().with_requires_grad(false);
        for row in us.data_mut().chunks_mut(r) {
            row.iter_mut().zip(s).for_each(|(x, &w)| *x = *x * w);
        }
        let vt = self.v.transpose().expect("v is 2-D");
        let w = us.matmul(&vt).expect("conforming factors");
        debug_assert_eq!(w.shape(), [d_out, self.d_in()]);
        w
    }

    pub fn bind(&self, g: &mut Graph<T>) -> SpectralBinding {
        SpectralBinding {
            u: g.leaf(&self.u),
            sigma: g.leaf(&self.sigma),
            v: g.leaf(&self.v),
            bias: g.leaf(&self.bias),
        }
    }

    /// `W^T = V diag(sigma) U^T` on the graph (`d_in x d_out`).
    pub fn weight_t(g: &mut Graph<T>, b: &SpectralBinding) -> Result<Var> {
        let vs = g.mul(b.v, b.sigma)?;
        g.matmul_nt(vs, b.u)
    }

    /// `x W^T + bias` for `x` with last axis `d_in`.
    pub fn apply_bound(g: &mut Graph<T>, b: &SpectralBinding, x: Var) -> Result<Var> {
        let d_in = g.shape(b.v)[0];
        if g.shape(x).last() != Some(&d_in) {
            return Err(Error::shape("spectral apply", g.shape(x), g.shape(b.v)));
        }
        let wt = Self::weight_t(g, b)?;
        let y = g.matmul(x, wt)?;
        g.add(y, b.bias)
    }

    pub fn apply(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, SpectralBinding)> {
        let b = self.bind(g);
        let y = Self::apply_bound(g, &b, x)?;
        Ok((y, b))
    }

    /// Overwrites sigma, keeping its trainability flag.
    pub fn set_sigma(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.rank() {
            return Err(Error::shape("set_sigma", &[self.rank()], &[values.len()]));
        }
        self.sigma.data_mut().copy_from_slice(values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<f64> {
        let n = shape[0] * shape[1];
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn frob(a: &[f64]) -> f64 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_layer_adds_bias() {
        let eye = Tensor::<f64>::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let bias = Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        let layer = SpectralLayer::decompose(&eye, &bias).unwrap();
        assert_eq!(layer.sigma().data(), &[1.0, 1.0, 1.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64([1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let (y, _) = layer.apply(&mut g, x).unwrap();
        let want = [1.5, 1.0, 5.0];
        for (a, b) in g.data(y).iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn reconstruct_round_trip_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random(&mut rng, [7, 5]);
        let layer = SpectralLayer::decompose(&w, &Tensor::zeros([7])).unwrap();
        let rec = layer.reconstruct();
        let diff: Vec<f64> = rec.data().iter().zip(w.data()).map(|(a, b)| a - b).collect();
        assert!(frob(&diff) / frob(w.data()) < 1e-10);

        let mut doubled = layer.clone();
        let s2: Vec<f64> = layer.sigma().data().iter().map(|s| 2.0 * s).collect();
        doubled.set_sigma(&s2).unwrap();
        // scaling by two is exact in binary floating point
        let r2 = doubled.reconstruct();
        for (a, b) in r2.data().iter().zip(rec.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn apply_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = random(&mut rng, [6, 9]);
        let bias = Tensor::new([6], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap();
        let layer = SpectralLayer::decompose(&w, &bias).unwrap();
        let x = random(&mut rng, [4, 9]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _) = layer.apply(&mut g, xv).unwrap();
        let w_rec = layer.reconstruct();
        for n in 0..4 {
            for o in 0..6 {
                let dense: f64 = (0..9).map(|i| w_rec.data()[o * 9 + i] * x.data()[n * 9 + i]).sum::<f64>()
                    + bias.data()[o];
                assert!((g.data(y)[n * 6 + o] - dense).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expert_outputs_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(&mut rng, [8, 8]);
        let layer = SpectralLayer::decompose(&w, &Tensor::zeros([8])).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (u, v, r) = (layer.u().data(), layer.v().data(), layer.rank());
        let expert = |i: usize| -> Vec<f64> {
            let proj: f64 = (0..8).map(|k| v[k * r + i] * x[k]).sum();
            (0..8).map(|k| u[k * r + i] * proj).collect()
        };
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    let d: f64 = expert(i).iter().zip(expert(j)).map(|(a, b)| a * b).sum();
                    assert!(d.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn masks_follow_the_ceil_rule() {
        let w = Tensor::<f64>::new([10, 10], (0..100).map(|i| ((i * 37) % 11) as f64).collect()).unwrap();
        let mut layer = SpectralLayer::decompose(&w, &Tensor::zeros([10])).unwrap();
        layer.set_mask(MaskStrategy::Top, 20.0).unwrap();
        let on: Vec<usize> = (0..10).filter(|&i| layer.is_trainable_entry(i)).collect();
        assert_eq!(on, vec![0, 1]);
        layer.set_mask(MaskStrategy::Bottom, 20.0).unwrap();
        let on: Vec<usize> = (0..10).filter(|&i| layer.is_trainable_entry(i)).collect();
        assert_eq!(on, vec![8, 9]);
        layer.set_mask(MaskStrategy::All, 50.0).unwrap();
        assert_eq!(layer.trainable_count(), 10);
        assert!(layer.set_mask(MaskStrategy::Top, 0.0).is_err());
        assert!(layer.set_mask(MaskStrategy::Top, 100.5).is_err());
        assert_eq!(masked_count(768, 80.0), 615);
        for r in 1..200 {
            for pct in [10.0, 20.0, 30.0, 50.0, 70.0, 80.0, 90.0, 100.0] {
                let want = (pct as usize * r).div_ceil(100);
                assert_eq!(masked_count(r, pct), want, "r={r} pct={pct}");
            }
        }
    }

    #[test]
    fn sigma_gradient_is_u_dw_v() {
        // dL/dsigma_i = u_i^T (dL/dW) v_i, with L = sum(C .* W) so dL/dW = C
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random(&mut rng, [5, 4]);
        let c = random(&mut rng, [5, 4]);
        let mut layer = SpectralLayer::decompose(&w, &Tensor::zeros([5])).unwrap();
        layer.sigma_mut().set_requires_grad(true);
        let mut g = Graph::new();
        let b = layer.bind(&mut g);
        let wt = SpectralLayer::weight_t(&mut g, &b).unwrap();
        let ct = g.constant(c.transpose().unwrap());
        let p = g.mul(wt, ct).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        let gs = grads.get(b.sigma).unwrap();
        let (u, v, r) = (layer.u().data(), layer.v().data(), layer.rank());
        for i in 0..r {
            let want: f64 = (0..5)
                .flat_map(|o| (0..4).map(move |k| (o, k)))
                .map(|(o, k)| u[o * r + i] * c.data()[o * 4 + k] * v[k * r + i])
                .sum();
            assert!((gs[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn squared_output_gradient_closed_form() {
        // L = ||W x||^2  =>  dL/dsigma_i = 2 sigma_i (v_i^T x)^2
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random(&mut rng, [6, 6]);
        let mut layer = SpectralLayer::decompose(&w, &Tensor::zeros([6])).unwrap();
        layer.sigma_mut().set_requires_grad(true);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new([1, 6], x.clone()).unwrap());
        let (y, b) = layer.apply(&mut g, xv).unwrap();
        let sq = g.square(y);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let gs = grads.get(b.sigma).unwrap();
        let (v, r) = (layer.v().data(), layer.rank());
        for i in 0..r {
            let proj: f64 = (0..6).map(|k| v[k * r + i] * x[k]).sum();
            let want = 2.0 * layer.sigma().data()[i] * proj * proj;
            assert!((gs[i] - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }
}
