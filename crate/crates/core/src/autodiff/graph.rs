//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its output value, so the forward pass
//! happens while the graph is built. Nodes only ever reference earlier nodes,
//! which makes the append order a topological order; [`Graph::backward`] walks
//! it once in reverse.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Partition of a flat vector into consecutive lists (one per query).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Self { offsets }
    }

    pub fn uniform(count: usize, len: usize) -> Self {
        Self::from_lengths(&vec![len; count])
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.iter().map(|r| r.len()).collect()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Elu(Var),
    Softplus(Var),
    Exp(Var),
    Sum(Var),
    LayerNorm { input: Var, inv_std: Vec<T> },
    SegSoftmax(Var, Segments),
    SegLogSoftmax(Var, Segments),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Segments,
        heads: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Elu(..) => "elu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SegSoftmax(..) => "softmax",
            Op::SegLogSoftmax(..) => "log_softmax",
            Op::Gather(..) => "gather",
            Op::Reshape(..) => "reshape",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Computation graph over tensors of scalar type `T`.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, true)
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("leaf node {}", self.nodes.len())));
        }
        Ok(self.push(Op::Leaf, t, requires_grad))
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(self.shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.shape_err(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, Tensor::new(shape, data)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let cols = self.value(a).cols();
        let r = self.value(row);
        if r.len() != cols || self.value(a).shape().len() < 2 {
            return Err(self.shape_err(
                op.name(),
                format!(
                    "cannot broadcast {:?} over rows of {:?}",
                    r.shape(),
                    self.value(a).shape()
                ),
            ));
        }
        let rd = r.data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(rd).map(|(&x, &y)| f(x, y)))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(op, Tensor::new(shape, data)?, rg))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.row_broadcast(a, bias, Op::AddRow(a, bias), |x, y| x + y)
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        self.row_broadcast(a, gain, Op::MulRow(a, gain), |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a);
        let data: Vec<T> = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(op, Tensor::new(shape, data).expect("same length"), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, Op::Elu(a), elu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "layer_norm")?;
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::lit(cols as f64);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &src[r * cols..(r + 1) * cols];
            let mu = x.iter().fold(T::zero(), |s, &v| s + v) / n;
            let var = x.iter().fold(T::zero(), |s, &v| s + (v - mu) * (v - mu)) / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::LayerNorm { input: a, inv_std },
            Tensor::new(vec![rows, cols], out)?,
            rg,
        ))
    }

    fn check_segments(&self, a: Var, segs: &Segments, op: &'static str) -> Result<()> {
        let len = self.value(a).len();
        if segs.total() != len {
            return Err(self.shape_err(
                op,
                format!("segments cover {} values, tensor has {len}", segs.total()),
            ));
        }
        if segs.iter().any(|r| r.is_empty()) {
            return Err(self.shape_err(op, "empty segment".into()));
        }
        Ok(())
    }

    /// Softmax within each segment of the flattened tensor.
    pub fn softmax(&mut self, a: Var, segs: &Segments) -> Result<Var> {
        self.check_segments(a, segs, "softmax")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for r in segs.iter() {
            softmax_into(&src[r.clone()], &mut out[r]);
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SegSoftmax(a, segs.clone()), Tensor::new(shape, out)?, rg))
    }

    /// Log-softmax within each segment, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var, segs: &Segments) -> Result<Var> {
        self.check_segments(a, segs, "log_softmax")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for r in segs.iter() {
            let x = &src[r.clone()];
            let lse = log_sum_exp(x);
            for (o, &v) in out[r].iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SegLogSoftmax(a, segs.clone()), Tensor::new(shape, out)?, rg))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "softmax")?;
        self.softmax(a, &Segments::uniform(rows, cols))
    }

    /// Picks entries of a flattened tensor into a vector; repeated indices allowed.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            match src.get(i) {
                Some(&v) => out.push(v),
                None => {
                    return Err(self.shape_err(
                        "gather",
                        format!("index {i} out of bounds for {} values", src.len()),
                    ))
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Gather(a, indices.to_vec()), Tensor::vector(out), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let data = self.value(a).data().to_vec();
        let t = Tensor::new(shape, data).map_err(|e| self.shape_err("reshape", e.to_string()))?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// Scaled dot-product multi-head self-attention, restricted to rows of the
    /// same segment. `q`, `k`, `v` are `[rows × width]`; head `h` uses columns
    /// `h*width/heads .. (h+1)*width/heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &Segments,
        heads: usize,
    ) -> Result<Var> {
        let (rows, width) = self.matrix_dims(q, "attention")?;
        for other in [k, v] {
            let dims = self.matrix_dims(other, "attention")?;
            if dims != (rows, width) {
                return Err(self.shape_err(
                    "attention",
                    format!("query {:?} vs key/value {:?}", (rows, width), dims),
                ));
            }
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        if segs.total() != rows || segs.iter().any(|r| r.is_empty()) {
            return Err(self.shape_err(
                "attention",
                format!("segments cover {} rows, tensor has {rows}", segs.total()),
            ));
        }
        let dh = width / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); rows * width];
        let mut probs = Vec::with_capacity(heads * segs.iter().map(|r| r.len() * r.len()).sum::<usize>());
        let mut logits = Vec::new();
        for seg in segs.iter() {
            let m = seg.len();
            for h in 0..heads {
                let c0 = h * dh;
                let start = probs.len();
                for i in seg.clone() {
                    logits.clear();
                    let qi = &qd[i * width + c0..i * width + c0 + dh];
                    for j in seg.clone() {
                        let kj = &kd[j * width + c0..j * width + c0 + dh];
                        logits.push(dot(qi, kj) * scale);
                    }
                    let base = probs.len();
                    probs.resize(base + m, T::zero());
                    softmax_into(&logits, &mut probs[base..]);
                }
                for (ii, i) in seg.clone().enumerate() {
                    let prow = &probs[start + ii * m..start + (ii + 1) * m];
                    let orow = &mut out[i * width + c0..i * width + c0 + dh];
                    for (jj, j) in seg.clone().enumerate() {
                        let p = prow[jj];
                        let vj = &vd[j * width + c0..j * width + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                segments: segs.clone(),
                heads,
                probs,
            },
            Tensor::new(vec![rows, width], out)?,
            rg,
        ))
    }

    /// Accumulates d`root`/d`node` for every node that requires gradients.
    ///
    /// Previously computed gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(Error::NotScalar(rt.shape().to_vec()));
        }
        if !rt.all_finite() {
            return Err(Error::NonFinite(format!("backward root node {}", root.0)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = self.acc(grads, *a);
                    for i in 0..m {
                        let drow = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = ga[i * k + p] + dot(drow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.acc(grads, *b);
                    for i in 0..m {
                        let drow = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            for (g, &d) in gb[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                *g = *g + av * d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |g| add_into(g, dy));
                self.acc_with(grads, *b, |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |g| add_into(g, dy));
                self.acc_with(grads, *b, |g| {
                    for (g, &d) in g.iter_mut().zip(dy) {
                        *g = *g - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(bd) {
                        *g = *g + d * x;
                    }
                });
                self.acc_with(grads, *b, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(ad) {
                        *g = *g + d * x;
                    }
                });
            }
            Op::AddRow(a, r) => {
                let cols = self.value(*r).len();
                self.acc_with(grads, *a, |g| add_into(g, dy));
                self.acc_with(grads, *r, |g| {
                    for chunk in dy.chunks(cols) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let cols = self.value(*r).len();
                let (ad, rd) = (self.value(*a).data(), self.value(*r).data());
                self.acc_with(grads, *a, |g| {
                    for (gc, dc) in g.chunks_mut(cols).zip(dy.chunks(cols)) {
                        for ((g, &d), &x) in gc.iter_mut().zip(dc).zip(rd) {
                            *g = *g + d * x;
                        }
                    }
                });
                self.acc_with(grads, *r, |g| {
                    for (dc, ac) in dy.chunks(cols).zip(ad.chunks(cols)) {
                        for ((g, &d), &x) in g.iter_mut().zip(dc).zip(ac) {
                            *g = *g + d * x;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc_with(grads, *a, |g| {
                    for (g, &d) in g.iter_mut().zip(dy) {
                        *g = *g + d * *c;
                    }
                });
            }
            Op::Elu(a) => {
                let x = self.value(*a).data();
                self.acc_with(grads, *a, |g| {
                    for (((g, &d), &xv), &yv) in g.iter_mut().zip(dy).zip(x).zip(y) {
                        let slope = if xv > T::zero() { T::one() } else { yv + T::one() };
                        *g = *g + d * slope;
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.acc_with(grads, *a, |g| {
                    for ((g, &d), &xv) in g.iter_mut().zip(dy).zip(x) {
                        *g = *g + d * sigmoid(xv);
                    }
                });
            }
            Op::Exp(a) => {
                self.acc_with(grads, *a, |g| {
                    for ((g, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                        *g = *g + d * yv;
                    }
                });
            }
            Op::Sum(a) => {
                let d = dy[0];
                self.acc_with(grads, *a, |g| {
                    for g in g.iter_mut() {
                        *g = *g + d;
                    }
                });
            }
            Op::LayerNorm { input, inv_std } => {
                let cols = self.value(*input).cols();
                let n = T::lit(cols as f64);
                self.acc_with(grads, *input, |g| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (dr, yr) = (&dy[span.clone()], &y[span.clone()]);
                        let mean_d = dr.iter().fold(T::zero(), |s, &v| s + v) / n;
                        let mean_dy = dot(dr, yr) / n;
                        for ((g, &d), &yv) in g[span].iter_mut().zip(dr).zip(yr) {
                            *g = *g + is * (d - mean_d - yv * mean_dy);
                        }
                    }
                });
            }
            Op::SegSoftmax(a, segs) => {
                self.acc_with(grads, *a, |g| {
                    for r in segs.iter() {
                        let s = dot(&dy[r.clone()], &y[r.clone()]);
                        for i in r {
                            g[i] = g[i] + y[i] * (dy[i] - s);
                        }
                    }
                });
            }
            Op::SegLogSoftmax(a, segs) => {
                self.acc_with(grads, *a, |g| {
                    for r in segs.iter() {
                        let s = dy[r.clone()].iter().fold(T::zero(), |acc, &v| acc + v);
                        for i in r {
                            g[i] = g[i] + dy[i] - y[i].exp() * s;
                        }
                    }
                });
            }
            Op::Gather(a, indices) => {
                self.acc_with(grads, *a, |g| {
                    for (&i, &d) in indices.iter().zip(dy) {
                        g[i] = g[i] + d;
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc_with(grads, *a, |g| add_into(g, dy));
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, segments, *heads, probs, dy, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segs: &Segments,
        heads: usize,
        probs: &[T],
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let width = self.value(q).cols();
        let dh = width / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let rows = qd.len() / width;
        let mut gq = vec![T::zero(); rows * width];
        let mut gk = vec![T::zero(); rows * width];
        let mut gv = vec![T::zero(); rows * width];
        let mut dp = Vec::new();
        let mut offset = 0;
        for seg in segs.iter() {
            let m = seg.len();
            let base = seg.start;
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[offset..offset + m * m];
                offset += m * m;
                for ii in 0..m {
                    let i = base + ii;
                    let dyi = &dy[i * width + c0..i * width + c0 + dh];
                    let prow = &p[ii * m..(ii + 1) * m];
                    // dV and dP for row i
                    dp.clear();
                    for jj in 0..m {
                        let j = base + jj;
                        let vj = &vd[j * width + c0..j * width + c0 + dh];
                        dp.push(dot(dyi, vj));
                        let pij = prow[jj];
                        for (g, &d) in gv[j * width + c0..j * width + c0 + dh].iter_mut().zip(dyi) {
                            *g = *g + pij * d;
                        }
                    }
                    let s = dot(&dp, prow);
                    let qi = &qd[i * width + c0..i * width + c0 + dh];
                    for jj in 0..m {
                        let ds = prow[jj] * (dp[jj] - s) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let j = base + jj;
                        let kj = &kd[j * width + c0..j * width + c0 + dh];
                        for (g, &x) in gq[i * width + c0..i * width + c0 + dh].iter_mut().zip(kj) {
                            *g = *g + ds * x;
                        }
                        for (g, &x) in gk[j * width + c0..j * width + c0 + dh].iter_mut().zip(qi) {
                            *g = *g + ds * x;
                        }
                    }
                }
            }
        }
        self.acc_with(grads, q, |g| add_into(g, &gq));
        self.acc_with(grads, k, |g| add_into(g, &gk));
        self.acc_with(grads, v, |g| add_into(g, &gv));
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if self.requires_grad(v) {
            f(self.acc(grads, v));
        }
    }
}

#[inline]
/// Four independent partial sums so the loop can be vectorized.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn add_into<T: Scalar>(g: &mut [T], d: &[T]) {
    for (g, &d) in g.iter_mut().zip(d) {
        *g = *g + d;
    }
}

#[inline]
pub(crate) fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let s = x.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
    m + s.ln()
}

pub(crate) fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

/// Softmax of a plain slice.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    softmax_into(x, &mut out);
    out
}

/// Log-softmax of a plain slice.
pub fn log_softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let lse = log_sum_exp(x);
    x.iter().map(|&v| v - lse).collect()
}
