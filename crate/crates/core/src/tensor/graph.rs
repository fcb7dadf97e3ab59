use super::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    /// The right operand's shape is a trailing suffix of the left's.
    Suffix,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        b_batched: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Expand(Var),
    Sum(Var, Vec<usize>),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sqrt(Var),
    Log(Var, T),
    Exp(Var),
    Square(Var),
    L2Norm {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Tape of operations for one forward pass.
///
/// Nodes are appended in execution order, which is a topological order.
/// [`Graph::backward`] consumes the tape.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t`. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let needs = t.requires_grad();
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: false,
            grad: None,
        };
        self.push(value, Op::Leaf, needs)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients of every
    /// leaf that requires one; the tape is dropped.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes;
        let loss_node = nodes
            .get(loss.0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node {}", loss.0)))?;
        if loss_node.value.numel() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", &loss_node.value.shape, &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if loss_node.needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            if matches!(nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backward_node(&nodes, idx, &g, &mut grads);
        }
        // only leaves keep their buffers
        for (i, node) in nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[i] = None;
            }
        }
        let shapes = nodes.into_iter().map(|n| n.value.shape).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf; `None` if the leaf does not require grad or
    /// the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.shapes[v.0].iter().product()],
        }
    }

    /// Writes the gradient of `v` into `t.grad`, honoring `t.requires_grad()`.
    pub fn write_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        if self.shapes[v.0] != t.shape {
            return Err(Error::shape("write_into", &self.shapes[v.0], &t.shape));
        }
        t.set_grad(self.get_or_zeros(v))
    }
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backward_node<T: Real>(nodes: &[Node<T>], idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[idx].value;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(nodes[idx].op, Op::Sub(..)) { -T::one() } else { T::one() };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                match bc {
                    Bcast::Same => gb.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + sign * d),
                    Bcast::Suffix => {
                        let bl = gb.len();
                        for (i, &d) in g.iter().enumerate() {
                            gb[i % bl] = gb[i % bl] + sign * d;
                        }
                    }
                }
            }
        }
        Op::Mul(a, b, bc) => {
            let av = &nodes[a.0].value.data;
            let bv = &nodes[b.0].value.data;
            let bl = bv.len();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &d) in g.iter().enumerate() {
                    let bj = if *bc == Bcast::Same { i } else { i % bl };
                    ga[i] = ga[i] + d * bv[bj];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, &d) in g.iter().enumerate() {
                    let bj = if *bc == Bcast::Same { i } else { i % bl };
                    gb[bj] = gb[bj] + d * av[i];
                }
            }
        }
        Op::Div(a, b, bc) => {
            let bv = &nodes[b.0].value.data;
            let bl = bv.len();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &d) in g.iter().enumerate() {
                    let bj = if *bc == Bcast::Same { i } else { i % bl };
                    ga[i] = ga[i] + d / bv[bj];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // d(a/b)/db = -(a/b)/b
                for (i, &d) in g.iter().enumerate() {
                    let bj = if *bc == Bcast::Same { i } else { i % bl };
                    gb[bj] = gb[bj] - d * out.data[i] / bv[bj];
                }
            }
        }
        Op::Neg(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &d)| *v = *v - d);
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &d)| *v = *v + d * *c);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &d)| *v = *v + d);
            }
        }
        Op::MatMul {
            a,
            b,
            trans_b,
            b_batched,
            batch,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let av = &nodes[a.0].value.data;
            let bv = &nodes[b.0].value.data;
            let b_stride = if *b_batched { k * n } else { 0 };
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * b_stride..i * b_stride + k * n];
                    // dA = dC * B^T, where B is (k, n) or stored (n, k) if trans_b
                    let bmat = if *trans_b {
                        MatRef::new(bi, n, k)
                    } else {
                        MatRef::new(bi, k, n).t()
                    };
                    gemm(
                        MatRef::new(gi, m, n),
                        bmat,
                        T::one(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * b_stride..i * b_stride + k * n];
                    if *trans_b {
                        // B stored (n, k): dB = dC^T * A
                        gemm(MatRef::new(gi, m, n).t(), MatRef::new(ai, m, k), T::one(), dst);
                    } else {
                        gemm(MatRef::new(ai, m, k).t(), MatRef::new(gi, m, n), T::one(), dst);
                    }
                }
            }
        }
        Op::Transpose { x, batch, rows, cols } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let (r, c) = (*rows, *cols);
                for bi in 0..*batch {
                    let base = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[base + i * c + j] = gx[base + i * c + j] + g[base + j * r + i];
                        }
                    }
                }
            }
        }
        Op::Permute(x, perm) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let in_shape = &nodes[x.0].value.shape;
                let strides = permuted_strides(in_shape, perm);
                let mut k = 0;
                for_each_offset(&out.shape, &strides, |off| {
                    gx[off] = gx[off] + g[k];
                    k += 1;
                });
            }
        }
        Op::Expand(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let strides = broadcast_strides(&out.shape, &nodes[x.0].value.shape);
                let mut k = 0;
                for_each_offset(&out.shape, &strides, |off| {
                    gx[off] = gx[off] + g[k];
                    k += 1;
                });
            }
        }
        Op::Sum(x, axes) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let in_shape = &nodes[x.0].value.shape;
                let strides = reduced_strides(in_shape, axes);
                let mut k = 0;
                for_each_offset(in_shape, &strides, |off| {
                    gx[k] = gx[k] + g[off];
                    k += 1;
                });
            }
        }
        Op::Gelu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let xv = &nodes[x.0].value.data;
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * gelu_grad(xv[i]);
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let d = *out.shape.last().unwrap_or(&1);
                for (row, (y, gr)) in out.data.chunks(d).zip(g.chunks(d)).enumerate() {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        let i = row * d + j;
                        gx[i] = gx[i] + y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let d = *out.shape.last().unwrap_or(&1);
                for (row, (y, gr)) in out.data.chunks(d).zip(g.chunks(d)).enumerate() {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..d {
                        let i = row * d + j;
                        gx[i] = gx[i] + gr[j] - y[j].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { x, xhat, inv_std } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let d = *out.shape.last().unwrap_or(&1);
                let dn = T::lit(d as f64);
                for (row, (xh, gr)) in xhat.chunks(d).zip(g.chunks(d)).enumerate() {
                    let sg: T = gr.iter().copied().sum();
                    let sgx: T = gr.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    let s = inv_std[row] / dn;
                    for j in 0..d {
                        let i = row * d + j;
                        gx[i] = gx[i] + s * (dn * gr[j] - sg - xh[j] * sgx);
                    }
                }
            }
        }
        Op::Sqrt(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let two = T::lit(2.0);
                for i in 0..g.len() {
                    let y = out.data[i];
                    // subgradient 0 at the kink
                    if y > T::zero() {
                        gx[i] = gx[i] + g[i] / (two * y);
                    }
                }
            }
        }
        Op::Log(x, eps) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let xv = &nodes[x.0].value.data;
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] / (xv[i] + *eps);
                }
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * out.data[i];
                }
            }
        }
        Op::Square(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let xv = &nodes[x.0].value.data;
                let two = T::lit(2.0);
                for i in 0..g.len() {
                    gx[i] = gx[i] + two * xv[i] * g[i];
                }
            }
        }
        Op::L2Norm { x, norms, eps } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let xv = &nodes[x.0].value.data;
                let d = *nodes[x.0].value.shape.last().unwrap_or(&1);
                for (row, &nrm) in norms.iter().enumerate() {
                    if nrm <= *eps {
                        continue;
                    }
                    for j in 0..d {
                        let i = row * d + j;
                        gx[i] = gx[i] + g[row] * xv[i] / nrm;
                    }
                }
            }
        }
        Op::Slice { x, axis, start } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let in_shape = &nodes[x.0].value.shape;
                let (outer, inner) = split_axis(in_shape, *axis);
                let full = in_shape[*axis];
                let len = out.shape[*axis];
                for o in 0..outer {
                    for a in 0..len {
                        let src = (o * len + a) * inner;
                        let dst = (o * full + start + a) * inner;
                        for e in 0..inner {
                            gx[dst + e] = gx[dst + e] + g[src + e];
                        }
                    }
                }
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, inner) = split_axis(&out.shape, *axis);
            let full = out.shape[*axis];
            let mut offset = 0;
            for x in xs {
                let len = nodes[x.0].value.shape[*axis];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = (o * len + a) * inner;
                            let src = (o * full + offset + a) * inner;
                            for e in 0..inner {
                                gx[dst + e] = gx[dst + e] + g[src + e];
                            }
                        }
                    }
                }
                offset += len;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Product of dims before `axis` and after it.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides into the input for each output axis of a permutation.
pub(crate) fn permuted_strides(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let s = contiguous_strides(in_shape);
    perm.iter().map(|&p| s[p]).collect()
}

/// Strides into a right-aligned broadcast operand, 0 on broadcast axes.
pub(crate) fn broadcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let s = contiguous_strides(in_shape);
    let lead = out_shape.len() - in_shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < lead || in_shape[i - lead] == 1 {
                0
            } else {
                s[i - lead]
            }
        })
        .collect()
}

/// Strides into the reduced tensor for each input axis, 0 on reduced axes.
pub(crate) fn reduced_strides(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = (0..in_shape.len())
        .filter(|i| !axes.contains(i))
        .map(|i| in_shape[i])
        .collect();
    let ks = contiguous_strides(&kept);
    let mut j = 0;
    (0..in_shape.len())
        .map(|i| {
            if axes.contains(&i) {
                0
            } else {
                j += 1;
                ks[j - 1]
            }
        })
        .collect()
}

/// Visits every index of `shape` in row-major order, passing the offset
/// computed with `strides`.
pub(crate) fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let nd = shape.len();
    if nd == 0 {
        f(0);
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let last = nd - 1;
    let (ls, lst) = (shape[last], strides[last]);
    loop {
        for i in 0..ls {
            f(off + i * lst);
        }
        // advance the outer odometer
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}
