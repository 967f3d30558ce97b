use std::borrow::Cow;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::pretrain::fp8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    /// Adds a constant tensor that carries no gradient (attention masks).
    AddConst(Var),
    NarrowCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax {
        x: Var,
        axis: usize,
    },
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<S>,
    },
    Silu(Var),
    LogSigmoid(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        cos: Vec<S>,
        sin: Vec<S>,
    },
    /// Log-softmax probability of each row's target; zero on ignored rows.
    PickLogSoftmax {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
    },
    Sum(Var),
    /// FP8 quantize-dequantize with a straight-through gradient.
    Fp8(Var),
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
    grad: Option<Vec<S>>,
}

/// Tape of recorded tensor operations.
///
/// Leaves may borrow their values (`param`/`constant`), so parameters are not
/// copied when a graph is built over a model.
pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    masked_rows: usize,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            masked_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of softmax slices so far that were entirely masked.
    pub fn fully_masked_rows(&self) -> usize {
        self.masked_rows
    }

    fn push(&mut self, value: Cow<'a, Tensor<S>>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: impl Into<Cow<'a, Tensor<S>>>) -> Var {
        self.push(value.into(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: impl Into<Cow<'a, Tensor<S>>>) -> Var {
        self.push(value.into(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.derived(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.derived(out, Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<S>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("add_const", self.shape(x), c.shape()));
        }
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .zip(c.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::AddConst(x), &[x]))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape("narrow_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new([r, len], data)?;
        Ok(self.derived(out, Op::NarrowCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new([r, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut data = self.value(x).data().to_vec();
        let mut slice = vec![S::zero(); n];
        for o in 0..outer {
            for j in 0..inner {
                for i in 0..n {
                    slice[i] = data[(o * n + i) * inner + j];
                }
                if kernels::softmax_in_place(&mut slice) {
                    self.masked_rows += 1;
                }
                for i in 0..n {
                    data[(o * n + i) * inner + j] = slice[i];
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, Op::Softmax { x, axis }, &[x]))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ weight` over the last axis.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: S) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(weight) != [d] {
            return Err(Error::shape("rms_norm", &xs, self.shape(weight)));
        }
        let w = self.value(weight).data();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); xv.len()];
        let mut inv = Vec::with_capacity(xv.len() / d);
        for (row, orow) in xv.chunks(d).zip(out.chunks_mut(d)) {
            inv.push(kernels::rms_norm_row(row, w, eps, orow));
        }
        let out = Tensor::new(xs, out)?;
        Ok(self.derived(
            out,
            Op::RmsNorm {
                x,
                w: weight,
                inv_rms: inv,
            },
            &[x, weight],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        self.derived(out, Op::Silu(x), &[x])
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::log_sigmoid);
        self.derived(out, Op::LogSigmoid(x), &[x])
    }

    /// Gathers rows of `table[V×d]` for `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Input("embedding of an empty sequence".into()));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenRange { id, size: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new([ids.len(), d], data)?;
        Ok(self.derived(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rotary embedding of `x[T × heads × head_dim]` at the given positions.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [t, heads, head_dim] = shape[..] else {
            return Err(Error::shape("rope", &shape, &[positions.len(), 0, 0]));
        };
        if head_dim % 2 != 0 {
            return Err(Error::Config(vec![format!(
                "head dimension {head_dim} must be even for rotary embeddings"
            )]));
        }
        if t != positions.len() {
            return Err(Error::shape("rope", &shape, &[positions.len()]));
        }
        let (cos, sin) = kernels::rope_tables::<S>(positions, head_dim, theta);
        let mut data = self.value(x).data().to_vec();
        kernels::rope_apply(&mut data, heads, head_dim, &cos, &sin, false);
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, Op::Rope { x, cos, sin }, &[x]))
    }

    /// Per-row log-softmax probability of the target token; ignored rows
    /// (`None`) yield zero and pass no gradient.
    pub fn pick_log_softmax(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t {
            return Err(Error::shape("pick_log_softmax", &[t, v], &[targets.len()]));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); t * v];
        let mut out = vec![S::zero(); t];
        for (pos, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            if target >= v {
                return Err(Error::TargetOutOfRange {
                    position: pos,
                    target,
                    vocab: v,
                });
            }
            let row = &lv[pos * v..(pos + 1) * v];
            let lse = kernels::logsumexp(row);
            out[pos] = row[target] - lse;
            for (p, &z) in probs[pos * v..(pos + 1) * v].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let out = Tensor::new([t], out)?;
        Ok(self.derived(
            out,
            Op::PickLogSoftmax {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, S::one() / S::cast(n as f64))
    }

    /// Mean next-token negative log-likelihood over rows whose target differs
    /// from `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let picked: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| (t != ignore_index).then_some(t))
            .collect();
        let n = picked.iter().filter(|t| t.is_some()).count();
        if n == 0 {
            return Err(Error::EmptyLoss);
        }
        let lp = self.pick_log_softmax(logits, &picked)?;
        let total = self.sum(lp);
        Ok(self.scale(total, -S::one() / S::cast(n as f64)))
    }

    /// FP8 E4M3 fake quantization. Gradient passes straight through.
    pub fn fp8(&mut self, x: Var) -> Var {
        let out = fp8::quantize_tensor(self.value(x));
        self.derived(out, Op::Fp8(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = self.nodes[idx]
                    .grad
                    .get_or_insert_with(|| vec![S::zero(); g.len()]);
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a = *a + *b;
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                if wants(*a) {
                    let bv = self.value(*b).data();
                    send(*a, &mut |buf| kernels::matmul_bt_acc(g, bv, buf, m, n, k));
                }
                if wants(*b) {
                    let av = self.value(*a).data();
                    send(*b, &mut |buf| kernels::matmul_at_acc(av, g, buf, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let gt = kernels::transpose(g, c, r);
                send(*x, &mut |buf| add_into(buf, &gt));
            }
            Op::Reshape(x) | Op::AddConst(x) | Op::Fp8(x) => send(*x, &mut |buf| add_into(buf, g)),
            Op::Add(a, b) => {
                send(*a, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| {
                    for (o, &d) in buf.iter_mut().zip(g) {
                        *o = *o - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &mut |buf| {
                    for ((o, &d), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o = *o + d * y;
                    }
                });
                send(*b, &mut |buf| {
                    for ((o, &d), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o = *o + d * x;
                    }
                });
            }
            Op::Scale(x, c) => send(*x, &mut |buf| {
                for (o, &d) in buf.iter_mut().zip(g) {
                    *o = *o + d * *c;
                }
            }),
            Op::NarrowCols { x, start } => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let len = g.len() / r;
                send(*x, &mut |buf| {
                    for i in 0..r {
                        for j in 0..len {
                            buf[i * c + start + j] = buf[i * c + start + j] + g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    send(p, &mut |buf| {
                        for i in 0..r {
                            for j in 0..w {
                                buf[i * w + j] = buf[i * w + j] + g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                send(*x, &mut |buf| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + j;
                            let dot: S = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..n {
                                buf[at(i)] = buf[at(i)] + y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let d = wv.len();
                let dn = S::cast(d as f64);
                if wants(*w) {
                    send(*w, &mut |buf| {
                        for ((xr, gr), &r) in xv.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                            for i in 0..d {
                                buf[i] = buf[i] + gr[i] * xr[i] * r;
                            }
                        }
                    });
                }
                send(*x, &mut |buf| {
                    for (((xr, gr), br), &r) in xv
                        .chunks(d)
                        .zip(g.chunks(d))
                        .zip(buf.chunks_mut(d))
                        .zip(inv_rms)
                    {
                        let dot: S = (0..d).map(|i| gr[i] * wv[i] * xr[i]).sum();
                        let coef = r * r * r * dot / dn;
                        for i in 0..d {
                            br[i] = br[i] + r * wv[i] * gr[i] - xr[i] * coef;
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                send(*x, &mut |buf| {
                    for ((o, &d), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o = *o + d * kernels::silu_grad(v);
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x).data();
                send(*x, &mut |buf| {
                    for ((o, &d), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o = *o + d * kernels::sigmoid(-v);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let (_, d) = self.value(*table).dims2().unwrap();
                send(*table, &mut |buf| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] = buf[id * d + j] + g[t * d + j];
                        }
                    }
                });
            }
            Op::Rope { x, cos, sin } => {
                let shape = node.value.shape();
                let mut back = g.to_vec();
                kernels::rope_apply(&mut back, shape[1], shape[2], cos, sin, true);
                send(*x, &mut |buf| add_into(buf, &back));
            }
            Op::PickLogSoftmax {
                logits,
                targets,
                probs,
            } => {
                let v = probs.len() / targets.len();
                send(*logits, &mut |buf| {
                    for (pos, target) in targets.iter().enumerate() {
                        let Some(target) = *target else { continue };
                        let gp = g[pos];
                        let row = &mut buf[pos * v..(pos + 1) * v];
                        for (o, &p) in row.iter_mut().zip(&probs[pos * v..(pos + 1) * v]) {
                            *o = *o - gp * p;
                        }
                        row[target] = row[target] + gp;
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                send(*x, &mut |buf| buf.iter_mut().for_each(|o| *o = *o + gv));
            }
        }
    }
}

fn add_into<S: Scalar>(buf: &mut [S], g: &[S]) {
    for (o, &d) in buf.iter_mut().zip(g) {
        *o = *o + d;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_gives_ones_and_square_gives_two_x() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let xv = g.param(&x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let x = t(&[2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(xv).is_none());
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let xv = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(xv), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        let p = g.value(y).data();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_slice_is_flagged() {
        let mut g = Graph::new();
        let x = g.constant(t(
            &[2, 2],
            &[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 1.0],
        ));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(&g.value(y).data()[..2], &[0.0, 0.0]);
        assert_eq!(g.fully_masked_rows(), 1);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn rms_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::<f64>::ones([4]));
        let x = g.constant(Tensor::<f64>::ones([4]));
        let y = g.rms_norm(x, ones, 1e-300).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 4]);

        let w = g.constant(Tensor::<f64>::ones([2]));
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.rms_norm(x, w, 0.0).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 0.848528137423857).abs() < 1e-12);
        assert!((out[1] - 1.131370849898476).abs() < 1e-12);
    }

    #[test]
    fn silu_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 50.0, 1.0]));
        let y = g.silu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 50.0).abs() < 1e-12);
        assert!((v[2] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_and_empty() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::<f64>::zeros([3, 256]));
        let l = g.cross_entropy(logits, &[1, 2, 3], usize::MAX).unwrap();
        assert!((g.value(l).item() - 256f64.ln()).abs() < 1e-12);
        assert!(matches!(
            g.cross_entropy(logits, &[7, 7, 7], 7),
            Err(Error::EmptyLoss)
        ));
        assert!(matches!(
            g.cross_entropy(logits, &[1, 300, 2], usize::MAX),
            Err(Error::TargetOutOfRange { position: 1, .. })
        ));
    }

    #[test]
    fn cross_entropy_with_large_margin_approaches_zero() {
        let mut data = vec![0.0; 2 * 4];
        data[1] = 1e4;
        data[4 + 3] = 1e4;
        let mut g = Graph::new();
        let logits = g.constant(t(&[2, 4], &data));
        let l = g.cross_entropy(logits, &[1, 3], usize::MAX).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }
}
