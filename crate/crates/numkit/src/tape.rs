//! Wengert-list reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever the
//! backward rule needs. `backward` walks the list once in reverse. Nodes that
//! do not depend on a tracked leaf carry no gradient.

use std::rc::Rc;

use crate::error::{dim_err, NumError, Result};
use crate::kernels::{
    self,
    attention::{self, FullArgs, FullGrads, NeighborArgs, NeighborGrads, NeighborTable},
    image::{self, PatchGeometry, ResizeGeometry},
    LayerNormStats,
};
use crate::scalar::Scalar;
use crate::tensor::{as_matrix, gemm_into, numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: LayerNormStats<T> },
    Gelu(Var),
    Relu(Var),
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Unfold { x: Var, geom: PatchGeometry },
    Resize { x: Var, geom: ResizeGeometry },
    Neighborhood {
        q: Var,
        k: Var,
        v: Var,
        rpe: Option<Var>,
        table: Rc<NeighborTable>,
        heads: usize,
        scale: T,
        weights: Vec<T>,
    },
    FullAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        weights: Vec<T>,
    },
    SoftmaxXent { logits: Var, labels: Rc<[u8]>, ignore: u8, probs: Vec<T>, count: usize },
    Nll { probs: Var, labels: Rc<[u8]>, ignore: u8, floor: T, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every tracked leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> NumError {
    NumError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
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

    /// A leaf that receives a gradient (`requires_grad`).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        let _ = name;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// `x + b` with `b` broadcast over every row of the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.last_dim();
        if tb.len() != c {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            T::ZERO,
        );
        self.push("matmul", out, Op::MatMul { a, b }, &[a, b])
    }

    /// `x . w + b` for a 2-D `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut data = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::from_vec(&[c, r], data)?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(x).data();
        let mut data = vec![T::ZERO; src.len()];
        if inner == 1 {
            kernels::softmax_rows(src, len, &mut data);
        } else {
            let mut buf = vec![T::ZERO; len];
            let mut res = vec![T::ZERO; len];
            for o in 0..outer {
                for i in 0..inner {
                    for (l, b) in buf.iter_mut().enumerate() {
                        *b = src[(o * len + l) * inner + i];
                    }
                    kernels::softmax_into(&buf, &mut res);
                    for (l, &r) in res.iter().enumerate() {
                        data[(o * len + l) * inner + i] = r;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        self.push("softmax", out, Op::Softmax { x, outer, len, inner }, &[x])
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.last_dim();
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layernorm", tx.shape(), tg.shape()));
        }
        if eps <= 0.0 {
            return Err(dim_err("layernorm", "eps must be positive"));
        }
        let mut out = Tensor::zeros(tx.shape());
        let stats = kernels::layernorm_rows(tx.data(), tg.data(), tb.data(), T::from_f64(eps), out.data_mut());
        self.push("layernorm", out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::ZERO));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Concatenate 2-D tensors with equal row counts along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err("concat", "no inputs"))?;
        let rows = as_matrix("concat", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix("concat", self.value(p))?;
            if r != rows {
                return Err(shape_err("concat", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[rows, total], data)?;
        self.push("concat", out, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix("slice_last", self.value(x))?;
        if start + len > cols {
            return Err(dim_err("slice_last", format!("{start}+{len} exceeds {cols} columns")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::from_vec(&[rows, len], data)?;
        self.push("slice_last", out, Op::SliceLast { x, start }, &[x])
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix("slice_rows", self.value(x))?;
        if start + len > rows {
            return Err(dim_err("slice_rows", format!("{start}+{len} exceeds {rows} rows")));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(&[len, cols], data)?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = T::from_usize(t.len().max(1));
        let out = Tensor::scalar(t.sum() / n);
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Extract sliding patches; the output is `[out_h * out_w, k * k * c]`.
    pub fn unfold(&mut self, x: Var, geom: PatchGeometry) -> Result<Var> {
        let t = self.value(x);
        if t.len() != geom.in_h * geom.in_w * geom.channels {
            return Err(dim_err(
                "unfold",
                format!("input {:?} does not match {}x{}x{}", t.shape(), geom.in_h, geom.in_w, geom.channels),
            ));
        }
        let mut out = Tensor::zeros(&[geom.out_h * geom.out_w, geom.patch_len()]);
        image::unfold(t.data(), &geom, out.data_mut());
        self.push("unfold", out, Op::Unfold { x, geom }, &[x])
    }

    /// Bilinear resize (half-pixel centers); output `[out_h * out_w, c]`.
    pub fn resize_bilinear(&mut self, x: Var, geom: ResizeGeometry) -> Result<Var> {
        let t = self.value(x);
        if t.len() != geom.in_h * geom.in_w * geom.channels || geom.out_h == 0 || geom.out_w == 0 {
            return Err(dim_err(
                "resize_bilinear",
                format!("input {:?} does not match {}x{}x{}", t.shape(), geom.in_h, geom.in_w, geom.channels),
            ));
        }
        if (geom.in_h, geom.in_w) == (geom.out_h, geom.out_w) {
            let out = t.clone().reshape(&[geom.out_h * geom.out_w, geom.channels])?;
            return self.push("resize_bilinear", out, Op::Reshape(x), &[x]);
        }
        let mut out = Tensor::zeros(&[geom.out_h * geom.out_w, geom.channels]);
        image::bilinear(t.data(), &geom, out.data_mut());
        self.push("resize_bilinear", out, Op::Resize { x, geom }, &[x])
    }

    /// Attention of each query over its own neighbor list. `rpe`, when given,
    /// has shape `[heads, num_slots, d_head]` and is added to the value row of
    /// every attended key according to its slot.
    pub fn neighborhood_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        rpe: Option<Var>,
        table: Rc<NeighborTable>,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (n, c) = as_matrix("neighborhood_attention", self.value(q))?;
        for t in [k, v] {
            if self.shape(t) != self.shape(q) {
                return Err(shape_err("neighborhood_attention", self.shape(q), self.shape(t)));
            }
        }
        if heads == 0 || c % heads != 0 {
            return Err(dim_err("neighborhood_attention", format!("{c} channels over {heads} heads")));
        }
        let d_head = c / heads;
        if table.queries() != n || table.keys.iter().any(|&k| k as usize >= n) {
            return Err(dim_err("neighborhood_attention", "neighbor table does not match token count"));
        }
        if let Some(r) = rpe {
            let expect = [heads, table.num_slots, d_head];
            if self.shape(r) != expect {
                return Err(shape_err("neighborhood_attention", self.shape(r), &expect));
            }
            if table.slots.iter().any(|&s| s as usize >= table.num_slots) {
                return Err(dim_err("neighborhood_attention", "slot index out of range"));
            }
        }
        let scale = T::from_f64(scale);
        let mut out = Tensor::zeros(&[n, c]);
        let weights = {
            let args = NeighborArgs {
                q: self.value(q).data(),
                k: self.value(k).data(),
                v: self.value(v).data(),
                rpe: rpe.map(|r| self.value(r).data()),
                table: &table,
                heads,
                d_head,
                scale,
            };
            attention::neighborhood_forward(&args, out.data_mut())
        };
        let mut inputs = vec![q, k, v];
        inputs.extend(rpe);
        self.push(
            "neighborhood_attention",
            out,
            Op::Neighborhood {
                q,
                k,
                v,
                rpe,
                table,
                heads,
                scale,
                weights,
            },
            &inputs,
        )
    }

    /// Multi-head attention of `q` (`[n, c]`) over keys/values `[m, c]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let (n, c) = as_matrix("attention", self.value(q))?;
        let (m, ck) = as_matrix("attention", self.value(k))?;
        if ck != c || self.shape(v) != self.shape(k) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || c % heads != 0 {
            return Err(dim_err("attention", format!("{c} channels over {heads} heads")));
        }
        let scale = T::from_f64(scale);
        let mut out = Tensor::zeros(&[n, c]);
        let weights = {
            let args = FullArgs {
                q: self.value(q).data(),
                k: self.value(k).data(),
                v: self.value(v).data(),
                queries: n,
                keys: m,
                heads,
                d_head: c / heads,
                scale,
            };
            attention::full_forward(&args, out.data_mut())
        };
        self.push(
            "attention",
            out,
            Op::FullAttention {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            },
            &[q, k, v],
        )
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits over rows whose
    /// label is not `ignore`. Zero when every row is ignored.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let (n, classes) = as_matrix("softmax_cross_entropy", self.value(logits))?;
        check_labels("softmax_cross_entropy", labels, n, classes, ignore)?;
        let (loss, probs, count) = kernels::softmax_xent(self.value(logits).data(), classes, labels, ignore);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.into(),
                ignore,
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Mean of `-ln(max(p[label], floor))` over non-ignored rows of a
    /// probability map.
    pub fn nll(&mut self, probs: Var, labels: &[u8], ignore: u8, floor: f64) -> Result<Var> {
        let (n, classes) = as_matrix("nll", self.value(probs))?;
        check_labels("nll", labels, n, classes, ignore)?;
        let floor = T::from_f64(floor);
        let p = self.value(probs).data();
        let mut total = T::ZERO;
        let mut count = 0;
        for (r, &lab) in labels.iter().enumerate() {
            if lab != ignore {
                total -= p[r * classes + lab as usize].max(floor).ln();
                count += 1;
            }
        }
        let loss = if count == 0 { T::ZERO } else { total / T::from_usize(count) };
        self.push(
            "nll",
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                labels: labels.into(),
                ignore,
                floor,
                count,
            },
            &[probs],
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(dim_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(v))
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = gd.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, Tensor::from_vec(ta.shape(), data).expect("shape"));
                }
                if self.wants(*b) {
                    let data = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, Tensor::from_vec(tb.shape(), data).expect("shape"));
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let s = *s;
                    accumulate(grads, *a, g.map(|v| v * s));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let c = g.last_dim();
                    let mut db = self.zeros_like(*b);
                    for row in gd.chunks_exact(c) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let mut da = self.zeros_like(*a);
                    gemm_into(m, n, k, gd, false, tb.data(), true, da.data_mut(), T::ZERO);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = self.zeros_like(*b);
                    gemm_into(k, m, n, ta.data(), true, gd, false, db.data_mut(), T::ZERO);
                    accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut dx = self.zeros_like(*x);
                    for i in 0..r {
                        for j in 0..c {
                            dx.data_mut()[j * r + i] = gd[i * c + j];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let dx = g.clone().reshape(self.shape(*x)).expect("reshape grad");
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let mut dx = self.zeros_like(*x);
                    if *inner == 1 {
                        kernels::softmax_rows_backward(y, gd, *len, dx.data_mut());
                    } else {
                        let d = dx.data_mut();
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let at = |l: usize| (o * len + l) * inner + i;
                                let dot: T = (0..*len).map(|l| y[at(l)] * gd[at(l)]).sum();
                                for l in 0..*len {
                                    d[at(l)] += y[at(l)] * (gd[at(l)] - dot);
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let mut dx = self.wants(*x).then(|| self.zeros_like(*x));
                let mut dg = self.wants(*gamma).then(|| self.zeros_like(*gamma));
                let mut db = self.wants(*beta).then(|| self.zeros_like(*beta));
                kernels::layernorm_rows_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    stats,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dg.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                    if let Some(t) = t {
                        accumulate(grads, v, t);
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let data = tx
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gv)| gv * kernels::gelu_grad(v))
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(tx.shape(), data).expect("shape"));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let data = tx
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gv)| if v > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(tx.shape(), data).expect("shape"));
                }
            }
            Op::ConcatLast(parts) => {
                let total = g.last_dim();
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, Tensor::from_vec(self.shape(p), dp).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                if self.wants(*x) {
                    let cols = self.value(*x).last_dim();
                    let w = g.last_dim();
                    let mut dx = self.zeros_like(*x);
                    for (r, row) in gd.chunks_exact(w).enumerate() {
                        dx.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(row);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let cols = self.value(*x).last_dim();
                    let mut dx = self.zeros_like(*x);
                    dx.data_mut()[start * cols..start * cols + gd.len()].copy_from_slice(gd);
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = T::from_usize(self.value(*x).len().max(1));
                    accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0] / n));
                }
            }
            Op::Unfold { x, geom } => {
                if self.wants(*x) {
                    let mut dx = self.zeros_like(*x);
                    image::unfold_backward(gd, geom, dx.data_mut());
                    accumulate(grads, *x, dx);
                }
            }
            Op::Resize { x, geom } => {
                if self.wants(*x) {
                    let mut dx = self.zeros_like(*x);
                    image::bilinear_backward(gd, geom, dx.data_mut());
                    accumulate(grads, *x, dx);
                }
            }
            Op::Neighborhood {
                q,
                k,
                v,
                rpe,
                table,
                heads,
                scale,
                weights,
            } => {
                let mut dq = self.wants(*q).then(|| self.zeros_like(*q));
                let mut dk = self.wants(*k).then(|| self.zeros_like(*k));
                let mut dv = self.wants(*v).then(|| self.zeros_like(*v));
                let mut dr = rpe.filter(|r| self.wants(*r)).map(|r| self.zeros_like(r));
                let c = self.value(*q).last_dim();
                let args = NeighborArgs {
                    q: self.value(*q).data(),
                    k: self.value(*k).data(),
                    v: self.value(*v).data(),
                    rpe: rpe.map(|r| self.value(r).data()),
                    table,
                    heads: *heads,
                    d_head: c / heads,
                    scale: *scale,
                };
                attention::neighborhood_backward(
                    &args,
                    weights,
                    gd,
                    NeighborGrads {
                        dq: dq.as_mut().map(|t| t.data_mut()),
                        dk: dk.as_mut().map(|t| t.data_mut()),
                        dv: dv.as_mut().map(|t| t.data_mut()),
                        drpe: dr.as_mut().map(|t| t.data_mut()),
                    },
                );
                for (var, t) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(t) = t {
                        accumulate(grads, var, t);
                    }
                }
                if let (Some(r), Some(t)) = (rpe, dr) {
                    accumulate(grads, *r, t);
                }
            }
            Op::FullAttention {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            } => {
                let mut dq = self.wants(*q).then(|| self.zeros_like(*q));
                let mut dk = self.wants(*k).then(|| self.zeros_like(*k));
                let mut dv = self.wants(*v).then(|| self.zeros_like(*v));
                let (n, c) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
                let args = FullArgs {
                    q: self.value(*q).data(),
                    k: self.value(*k).data(),
                    v: self.value(*v).data(),
                    queries: n,
                    keys: self.value(*k).shape()[0],
                    heads: *heads,
                    d_head: c / heads,
                    scale: *scale,
                };
                attention::full_backward(
                    &args,
                    weights,
                    gd,
                    FullGrads {
                        dq: dq.as_mut().map(|t| t.data_mut()),
                        dk: dk.as_mut().map(|t| t.data_mut()),
                        dv: dv.as_mut().map(|t| t.data_mut()),
                    },
                );
                for (var, t) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(t) = t {
                        accumulate(grads, var, t);
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                if self.wants(*logits) && *count > 0 {
                    let classes = self.value(*logits).last_dim();
                    let s = gd[0] / T::from_usize(*count);
                    let mut dl = self.zeros_like(*logits);
                    for (r, (d, p)) in dl
                        .data_mut()
                        .chunks_exact_mut(classes)
                        .zip(probs.chunks_exact(classes))
                        .enumerate()
                    {
                        let lab = labels[r];
                        if lab == *ignore {
                            continue;
                        }
                        for (dv, &pv) in d.iter_mut().zip(p) {
                            *dv = pv * s;
                        }
                        d[lab as usize] -= s;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
            Op::Nll {
                probs,
                labels,
                ignore,
                floor,
                count,
            } => {
                if self.wants(*probs) && *count > 0 {
                    let classes = self.value(*probs).last_dim();
                    let p = self.value(*probs).data();
                    let s = gd[0] / T::from_usize(*count);
                    let mut dp = self.zeros_like(*probs);
                    for (r, &lab) in labels.iter().enumerate() {
                        if lab == *ignore {
                            continue;
                        }
                        let at = r * classes + lab as usize;
                        if p[at] > *floor {
                            dp.data_mut()[at] = -s / p[at];
                        }
                    }
                    accumulate(grads, *probs, dp);
                }
            }
        }
    }
}

fn check_labels(op: &'static str, labels: &[u8], rows: usize, classes: usize, ignore: u8) -> Result<()> {
    if labels.len() != rows {
        return Err(dim_err(op, format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l != ignore && l as usize >= classes) {
        return Err(dim_err(op, format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
