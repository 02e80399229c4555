//! Computation record for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value. Nodes are only
//! ever appended, so construction order is a topological order and the
//! backward sweep is a single reverse pass over the node list.

use super::array::{gemm, permute_data, Array, MatView, Scalar};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, shared_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    DivScalar { x: Var, s: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    MeanAxis { x: Var, axis: usize },
    L2Normalize { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T>, mask: Vec<bool>, count: usize },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Single owner; build one per
/// forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::Shape { op, left: a.to_vec(), right: b.to_vec() }
}

fn is_suffix(full: &[usize], tail: &[usize]) -> bool {
    tail.len() <= full.len() && full[full.len() - tail.len()..] == *tail
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    ///
    /// `b` either carries the same leading batch extents as `a` or is a plain
    /// matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes: `[.., m, k] x [.., n, k] -> [.., m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err(op, &sa, &sb));
        }
        let batch_a = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *batch_a {
            return Err(shape_err(op, &sa, &sb));
        }
        let batch: usize = batch_a.iter().product();
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let bview = |off: usize| {
                let v = MatView::row_major(&bd[off..off + k * n], if trans_b { n } else { k }, if trans_b { k } else { n });
                if trans_b {
                    v.t()
                } else {
                    v
                }
            };
            if shared_b {
                gemm(MatView::row_major(ad, batch * m, k), bview(0), T::zero(), &mut out);
            } else {
                for i in 0..batch {
                    gemm(
                        MatView::row_major(&ad[i * m * k..(i + 1) * m * k], m, k),
                        bview(i * k * n),
                        T::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        let value = Array::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b, shared_b }, &[a, b]))
    }

    /// Elementwise sum. `b` may match a trailing suffix of `a`'s shape, in
    /// which case it is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sa, sb) {
            return Err(shape_err("add", sa, sb));
        }
        let bd = self.value(b).data();
        let bl = bd.len();
        let data: Vec<T> = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bd[i % bl]).collect();
        let value = Array::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sa, sb) {
            return Err(shape_err("mul", sa, sb));
        }
        let bd = self.value(b).data();
        let bl = bd.len();
        let data: Vec<T> = self.value(a).data().iter().enumerate().map(|(i, &x)| x * bd[i % bl]).collect();
        let value = Array::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let v = self.value(x);
        let value = Array::new(v.shape().to_vec(), v.data().iter().map(|&e| e * f).collect()).expect("same shape");
        self.push(value, Op::Scale { x, factor: f }, &[x])
    }

    /// Divides every element of `x` by the single value held in `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("div_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let v = self.value(x);
        let value = Array::new(v.shape().to_vec(), v.data().iter().map(|&e| e / sv).collect())?;
        Ok(self.push(value, Op::DivScalar { x, s }, &[x, s]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Array::new(v.shape().to_vec(), v.data().iter().map(|&e| gelu_fwd(e)).collect()).expect("same shape");
        self.push(value, Op::Gelu { x }, &[x])
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Axis { axis, rank: shape.len() });
        }
        let out = softmax_data(self.value(x).data(), &shape, axis);
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::from_f64(eps);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / n;
        let nt = T::from_f64(n as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(n) {
            let mu = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nt;
            let r = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mu) * r * g[j] + b[j]);
            }
            mean.push(mu);
            rstd.push(r);
        }
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, mean, rstd }, &[x, gamma, beta]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericsError::Contract(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let value = Array::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Selects slices along axis 0. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if idx.is_empty() {
            return Err(NumericsError::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::Contract(format!("row index {bad} out of range for shape {shape:?}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&xd[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let value = Array::new(out_shape, out)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| NumericsError::Contract("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(NumericsError::Axis { axis, rank: first.len() });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let ext = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Array::new(shape, out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// The sub-range `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Axis { axis, rank: shape.len() });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(NumericsError::Contract(format!("narrow [{start}, {}) out of range for axis {axis} of {shape:?}", start + len)));
        }
        let (outer, ext, inner) = around(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Array::new(out_shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Mean over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Axis { axis, rank: shape.len() });
        }
        let (outer, ext, inner) = around(&shape, axis);
        let d = self.value(x).data();
        let inv = T::one() / T::from_f64(ext as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &d[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &s)| s).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Array::new(out_shape, out)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Scales each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let floor = T::from_f64(1e-12);
        let d = self.value(x).data();
        let mut norms = Vec::with_capacity(d.len() / n);
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks_exact(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            out.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        let value = Array::new(shape, out).expect("same shape");
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    /// Mean of `-log softmax(logits)[target]` over rows of `logits` (last axis = classes).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().expect("non-empty shape");
        let rows = self.value(logits).len() / classes;
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(NumericsError::Contract(format!("target class {bad} out of range for {classes} classes")));
        }
        let probs = softmax_data(self.value(logits).data(), &[rows, classes], 1);
        let d = self.value(logits).data();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &d[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
        }
        loss /= T::from_f64(rows as f64);
        Ok(self.push(Array::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// Mean squared error over the elements selected by `mask`, normalized by
    /// the number of selected elements.
    pub fn mse(&mut self, pred: Var, target: &Array<T>, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if target.shape() != shape.as_slice() || mask.len() != target.len() {
            return Err(shape_err("mse", &shape, target.shape()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NumericsError::DegenerateMask);
        }
        let p = self.value(pred).data();
        let mut sum = T::zero();
        for ((&pv, &tv), &m) in p.iter().zip(target.data()).zip(mask) {
            if m {
                sum += (pv - tv) * (pv - tv);
            }
        }
        let loss = sum / T::from_f64(count as f64);
        Ok(self.push(
            Array::scalar(loss),
            Op::Mse { pred, target: target.data().to_vec(), mask: mask.to_vec(), count },
            &[pred],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Array::scalar(total), Op::Sum { x }, &[x])
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(NumericsError::NotScalar(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|g| Array::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b, shared_b } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = node.value.shape()[node.value.shape().len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                // b stored as [k, n], or [n, k] when transposed.
                let b_mat = |off: usize| {
                    if *trans_b {
                        MatView::row_major(&bd[off..off + k * n], n, k).t()
                    } else {
                        MatView::row_major(&bd[off..off + k * n], k, n)
                    }
                };
                if self.wants(*a) {
                    let ga = accum(grads, *a, ad.len());
                    if *shared_b {
                        gemm(MatView::row_major(g, batch * m, n), b_mat(0).t(), T::one(), ga);
                    } else {
                        for i in 0..batch {
                            gemm(
                                MatView::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                                b_mat(i * k * n).t(),
                                T::one(),
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = accum(grads, *b, bd.len());
                    // d(b) = aᵀ g, or gᵀ a when b is transposed.
                    if *shared_b {
                        let a_flat = MatView::row_major(ad, batch * m, k);
                        let g_flat = MatView::row_major(g, batch * m, n);
                        if *trans_b {
                            gemm(g_flat.t(), a_flat, T::one(), gb);
                        } else {
                            gemm(a_flat.t(), g_flat, T::one(), gb);
                        }
                    } else {
                        for i in 0..batch {
                            let a_i = MatView::row_major(&ad[i * m * k..(i + 1) * m * k], m, k);
                            let g_i = MatView::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                            let dst = &mut gb[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                gemm(g_i.t(), a_i, T::one(), dst);
                            } else {
                                gemm(a_i.t(), g_i, T::one(), dst);
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    let ga = accum(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if self.wants(*b) {
                    let bl = self.value(*b).len();
                    let gb = accum(grads, *b, bl);
                    for chunk in g.chunks_exact(bl) {
                        gb.iter_mut().zip(chunk).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let bl = bd.len();
                if self.wants(*a) {
                    let ga = accum(grads, *a, g.len());
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i] * bd[i % bl];
                    }
                }
                if self.wants(*b) {
                    let gb = accum(grads, *b, bl);
                    for (i, (&gv, &av)) in g.iter().zip(ad).enumerate() {
                        gb[i % bl] += gv * av;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let gx = accum(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *factor);
            }
            Op::DivScalar { x, s } => {
                let sv = self.value(*s).item();
                if self.wants(*x) {
                    let gx = accum(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v / sv);
                }
                if self.wants(*s) {
                    let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    accum(grads, *s, 1)[0] -= dot / sv;
                }
            }
            Op::Gelu { x } => {
                let xd = self.value(*x).data();
                let gx = accum(grads, *x, g.len());
                for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                    *d += gv * gelu_grad(xv);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, ext, inner) = around(node.value.shape(), *axis);
                let gx = accum(grads, *x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * ext * inner + i;
                        let mut dot = T::zero();
                        for e in 0..ext {
                            let j = base + e * inner;
                            dot += g[j] * y[j];
                        }
                        for e in 0..ext {
                            let j = base + e * inner;
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xd = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let n = gm.len();
                let nt = T::from_f64(n as f64);
                if self.wants(*gamma) {
                    let gg = accum(grads, *gamma, n);
                    for (r, (row, grow)) in xd.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                        for j in 0..n {
                            gg[j] += grow[j] * (row[j] - mean[r]) * rstd[r];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = accum(grads, *beta, n);
                    for grow in g.chunks_exact(n) {
                        gb.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                    }
                }
                if self.wants(*x) {
                    let gx = accum(grads, *x, xd.len());
                    let mut dxhat = vec![T::zero(); n];
                    for (r, (row, grow)) in xd.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            dxhat[j] = grow[j] * gm[j];
                            let xhat = (row[j] - mean[r]) * rstd[r];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xhat;
                        }
                        let (md, mdx) = (sum_d / nt, sum_dx / nt);
                        for j in 0..n {
                            let xhat = (row[j] - mean[r]) * rstd[r];
                            gx[r * n + j] += rstd[r] * (dxhat[j] - md - xhat * mdx);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                let gx = accum(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                let gx = accum(grads, *x, g.len());
                gx.iter_mut().zip(back).for_each(|(d, v)| *d += v);
            }
            Op::GatherRows { x, idx } => {
                let xs = self.shape(*x);
                let width: usize = xs[1..].iter().product();
                let gx = accum(grads, *x, xs[0] * width);
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g[r * width..(r + 1) * width];
                    gx[i * width..(i + 1) * width].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = around(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let ext = self.shape(v)[*axis];
                    if self.wants(v) {
                        let gv = accum(grads, v, outer * ext * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            gv[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, ext, inner) = around(&xs, *axis);
                let len = node.value.shape()[*axis];
                let gx = accum(grads, *x, outer * ext * inner);
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    gx[dst..dst + len * inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let (outer, ext, inner) = around(&xs, *axis);
                let inv = T::one() / T::from_f64(ext as f64);
                let gx = accum(grads, *x, outer * ext * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for e in 0..ext {
                        let base = (o * ext + e) * inner;
                        gx[base..base + inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s * inv);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let n = *node.value.shape().last().expect("shape");
                let gx = accum(grads, *x, g.len());
                for (r, (yrow, grow)) in y.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                    let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += (grow[j] - yrow[j] * dot) / norms[r];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = probs.len() / targets.len();
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let gl = accum(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        gl[r * classes + c] += (probs[r * classes + c] - onehot) * scale;
                    }
                }
            }
            Op::Mse { pred, target, mask, count } => {
                let p = self.value(*pred).data();
                let scale = g[0] * T::from_f64(2.0 / *count as f64);
                let gp = accum(grads, *pred, p.len());
                for i in 0..p.len() {
                    if mask[i] {
                        gp[i] += (p[i] - target[i]) * scale;
                    }
                }
            }
            Op::Sum { x } => {
                let gx = accum(grads, *x, self.value(*x).len());
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// `tanh` through `exp`, which is several times cheaper than libm's `tanhf`.
/// Saturates correctly at both ends.
fn tanh<T: Scalar>(u: T) -> T {
    let two = T::from_f64(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

pub(crate) fn softmax_data<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, ext, inner) = around(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * ext * inner + i;
            let mut max = T::neg_infinity();
            for e in 0..ext {
                max = max.max(data[base + e * inner]);
            }
            let mut total = T::zero();
            for e in 0..ext {
                let v = (data[base + e * inner] - max).exp();
                out[base + e * inner] = v;
                total += v;
            }
            for e in 0..ext {
                out[base + e * inner] /= total;
            }
        }
    }
    out
}
