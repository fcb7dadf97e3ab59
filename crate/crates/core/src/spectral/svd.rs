//! One-sided (Hestenes) Jacobi SVD.

use crate::error::{Error, Result};

/// Stop when every column pair has `|g_p . g_q| <= TOL * |g_p| |g_q|`.
pub const JACOBI_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;

/// Thin SVD `A = U diag(s) V^T` of an `m x n` row-major matrix.
///
/// `u` is `m x r` and `v` is `n x r`, both row-major, with `r = min(m, n)`.
/// Singular values are non-negative and sorted non-increasing; the
/// largest-magnitude entry of every column of `u` is non-negative.
#[derive(Clone, Debug)]
pub struct Svd {
    pub m: usize,
    pub n: usize,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    pub sweeps: usize,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

pub fn jacobi_svd(a: &[f64], m: usize, n: usize) -> Result<Svd> {
    if a.len() != m * n {
        return Err(Error::shape("svd", &[m, n], &[a.len()]));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    if m >= n {
        tall_svd(a, m, n)
    } else {
        // A^T = U' S V'^T  =>  A = V' S U'^T
        let mut at = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                at[j * m + i] = a[i * n + j];
            }
        }
        let t = tall_svd(&at, n, m)?;
        let mut out = Svd {
            m,
            n,
            u: t.v,
            s: t.s,
            v: t.u,
            sweeps: t.sweeps,
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

fn tall_svd(a: &[f64], m: usize, n: usize) -> Result<Svd> {
    // columns stored contiguously
    let mut g = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            g[j * m + i] = a[i * n + j];
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let (gp, gq) = pair_mut(&mut g, p, q, m);
                let alpha: f64 = gp.iter().map(|x| x * x).sum();
                let beta: f64 = gq.iter().map(|x| x * x).sum();
                let gamma: f64 = gp.iter().zip(gq.iter()).map(|(x, y)| x * y).sum();
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(gp, gq, c, s);
                let (vp, vq) = pair_mut(&mut v, p, q, n);
                rotate(vp, vq, c, s);
            }
        }
        if residual <= JACOBI_TOL {
            break;
        }
    }
    if residual > JACOBI_TOL {
        return Err(Error::NoConvergence { sweeps, residual });
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| g[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let smax = norms[order[0]];
    let floor = smax * f64::EPSILON * (m.max(n) as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vcols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let col = &g[j * m..(j + 1) * m];
        let sigma = norms[j];
        if sigma > floor && sigma > 0.0 {
            ucols.push(col.iter().map(|x| x / sigma).collect());
        } else {
            ucols.push(vec![0.0; m]);
            degenerate.push(k);
        }
        s.push(sigma);
        vcols.push(v[j * n..(j + 1) * n].to_vec());
    }
    complete_basis(&mut ucols, &degenerate, m);

    let mut u = vec![0.0; m * n];
    for (k, col) in ucols.iter().enumerate() {
        for i in 0..m {
            u[i * n + k] = col[i];
        }
    }
    let mut vv = vec![0.0; n * n];
    for (k, col) in vcols.iter().enumerate() {
        for i in 0..n {
            vv[i * n + k] = col[i];
        }
    }
    let mut out = Svd {
        m,
        n,
        u,
        s,
        v: vv,
        sweeps,
    };
    fix_signs(&mut out);
    Ok(out)
}

fn pair_mut(buf: &mut [f64], p: usize, q: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = buf.split_at_mut(q * len);
    (&mut lo[p * len..(p + 1) * len], &mut hi[..len])
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the listed columns with unit vectors orthogonal to all others.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < m, "ran out of basis candidates");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (missing.contains(&j) && c.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let d: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[k] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Flips `u_i` and `v_i` together so the largest-magnitude entry of `u_i`
/// is non-negative.
fn fix_signs(svd: &mut Svd) {
    let r = svd.rank();
    for k in 0..r {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..svd.m {
            let x = svd.u[i * r + k];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..svd.m {
                svd.u[i * r + k] = -svd.u[i * r + k];
            }
            for i in 0..svd.n {
                svd.v[i * r + k] = -svd.v[i * r + k];
            }
        }
    }
}
