//! Forward operations recorded on a [`Graph`].

use super::graph::{
    broadcast_strides, for_each_offset, gelu, permuted_strides, reduced_strides, split_axis, Bcast,
    Op,
};
use super::{gemm, Graph, MatRef, Real, Tensor, Var, LAYER_NORM_EPS, LOG_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl<T: Real> Graph<T> {
    fn unary_value(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (a, b, bc) = if sa == sb {
            (a, b, Bcast::Same)
        } else {
            let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
            let a = if sa == out { a } else { self.expand(a, &out)? };
            if out.ends_with(&sb) {
                (a, b, Bcast::Suffix)
            } else {
                let b = self.expand(b, &out)?;
                (a, b, Bcast::Same)
            }
        };
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let bl = bv.len();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> = match bc {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Suffix => av.iter().enumerate().map(|(i, &x)| f(x, bv[i % bl])).collect(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let op = match kind {
            Binary::Add => Op::Add(a, b, bc),
            Binary::Sub => Op::Sub(a, b, bc),
            Binary::Mul => Op::Mul(a, b, bc),
            Binary::Div => Op::Div(a, b, bc),
        };
        Ok(self.push(value, op, needs))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.unary_value(x, |a| -a);
        let needs = self.needs_grad(x);
        self.push(value, Op::Neg(x), needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.unary_value(x, |a| a * c);
        let needs = self.needs_grad(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.unary_value(x, |a| a + c);
        let needs = self.needs_grad(x);
        self.push(value, Op::AddScalar(x), needs)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either 2-D (shared by every leading index of `a`) or has the
    /// same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape(if trans_b { "matmul_nt" } else { "matmul" }, &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (k_b, n) = if trans_b { (bc, br) } else { (br, bc) };
        let k = sa[sa.len() - 1];
        if k != k_b {
            return Err(err());
        }
        let (batch, m, b_batched) = if sb.len() == 2 {
            (1, sa[..sa.len() - 1].iter().product::<usize>(), false)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            (sa[..sa.len() - 2].iter().product::<usize>(), sa[sa.len() - 2], true)
        };
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut data = vec![T::zero(); batch * m * n];
        {
            let av = &self.value(a).data;
            let bv = &self.value(b).data;
            let b_stride = if b_batched { k * n } else { 0 };
            for i in 0..batch {
                let ai = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                let bslice = &bv[i * b_stride..i * b_stride + k * n];
                let bi = if trans_b {
                    MatRef::new(bslice, n, k).t()
                } else {
                    MatRef::new(bslice, k, n)
                };
                gemm(ai, bi, T::zero(), &mut data[i * m * n..(i + 1) * m * n]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                b_batched,
                batch,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); xv.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    data[base + j * rows + i] = xv[base + i * cols + j];
                }
            }
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let value = Tensor::new(shape, data)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Transpose { x, batch, rows, cols }, needs))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let strides = permuted_strides(&s, perm);
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(xv.len());
        for_each_offset(&out_shape, &strides, |off| data.push(xv[off]));
        let value = Tensor::new(out_shape, data)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if shape.iter().product::<usize>() != s.iter().product::<usize>() {
            return Err(Error::shape("reshape", s, shape));
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data.clone())?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Broadcasts `x` to `shape` (right-aligned, size-1 or missing axes expand).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if broadcast_shape(&s, shape).as_deref() != Some(shape) {
            return Err(Error::shape("expand", &s, shape));
        }
        let strides = broadcast_strides(shape, &s);
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(shape.iter().product());
        for_each_offset(shape, &strides, |off| data.push(xv[off]));
        let value = Tensor::new(shape.to_vec(), data)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Expand(x), needs))
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= s.len()) {
            return Err(Error::shape("sum_axes", &s, axes));
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let out_shape: Vec<usize> = (0..s.len()).filter(|i| !axes.contains(i)).map(|i| s[i]).collect();
        let strides = reduced_strides(&s, &axes);
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let mut k = 0;
        for_each_offset(&s, &strides, |off| {
            data[off] = data[off] + xv[k];
            k += 1;
        });
        let value = Tensor::new(out_shape, data)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Sum(x, axes), needs))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let count: usize = axes.iter().filter_map(|&a| s.get(a)).product();
        let sum = self.sum_axes(x, axes)?;
        Ok(self.scale(sum, T::one() / T::lit(count.max(1) as f64)))
    }

    /// Population variance over `axes`.
    pub fn var_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mean = self.mean_axes(x, axes)?;
        // re-insert reduced axes as size 1 so broadcasting lines up
        let keep: Vec<usize> = (0..s.len()).map(|i| if axes.contains(&i) { 1 } else { s[i] }).collect();
        let mean = self.reshape(mean, &keep)?;
        let diff = self.sub(x, mean)?;
        let sq = self.square(diff);
        self.mean_axes(sq, axes)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes).expect("all axes are valid")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.unary_value(x, gelu);
        let needs = self.needs_grad(x);
        self.push(value, Op::Gelu(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.unary_value(x, |a| a * a);
        let needs = self.needs_grad(x);
        self.push(value, Op::Square(x), needs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.unary_value(x, |a| a.sqrt());
        let needs = self.needs_grad(x);
        self.push(value, Op::Sqrt(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.unary_value(x, |a| a.exp());
        let needs = self.needs_grad(x);
        self.push(value, Op::Exp(x), needs)
    }

    /// `ln(x + 1e-8)`.
    pub fn log(&mut self, x: Var) -> Var {
        let eps = T::lit(LOG_EPS);
        let value = self.unary_value(x, |a| (a + eps).ln());
        let needs = self.needs_grad(x);
        self.push(value, Op::Log(x, eps), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape.last().unwrap_or(&1);
        let mut data = v.data.clone();
        for row in data.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                total = total + *e;
            }
            row.iter_mut().for_each(|e| *e = *e / total);
        }
        let value = Tensor::new(v.shape.clone(), data).expect("same shape");
        let needs = self.needs_grad(x);
        self.push(value, Op::Softmax(x), needs)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape.last().unwrap_or(&1);
        let mut data = v.data.clone();
        for row in data.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&e| (e - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|e| *e = *e - lse);
        }
        let value = Tensor::new(v.shape.clone(), data).expect("same shape");
        let needs = self.needs_grad(x);
        self.push(value, Op::LogSoftmax(x), needs)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape.last().unwrap_or(&1);
        let dn = T::lit(d as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let rows = v.data.len() / d.max(1);
        let mut xhat = Vec::with_capacity(v.data.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in v.data.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&e| (e - mean) * is));
        }
        let value = Tensor::new(v.shape.clone(), xhat.clone()).expect("same shape");
        let needs = self.needs_grad(x);
        let op = if needs {
            Op::LayerNorm { x, xhat, inv_std }
        } else {
            Op::Leaf
        };
        self.push(value, op, needs)
    }

    /// L2 norm over the last axis, floored at `eps`. Drops the last axis.
    pub fn l2_norm_last(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let d = *v.shape.last().unwrap_or(&1);
        let norms: Vec<T> = v
            .data
            .chunks(d)
            .map(|r| r.iter().map(|&e| e * e).sum::<T>().sqrt())
            .collect();
        let data = norms.iter().map(|&n| n.max(eps)).collect();
        let shape = v.shape[..v.shape.len().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data).expect("row count");
        let needs = self.needs_grad(x);
        self.push(value, Op::L2Norm { x, norms, eps }, needs)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let (outer, inner) = split_axis(&s, axis);
        let full = s[axis];
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, needs))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || (0..s.len()).any(|i| i != axis && s[i] != first[i]) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let xv = &self.value(x).data;
                data.extend_from_slice(&xv[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let needs = xs.iter().any(|&x| self.needs_grad(x));
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), needs))
    }
}
