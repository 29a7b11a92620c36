//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records each primitive eagerly (forward value computed at call
//! time) and differentiates by walking the records in reverse creation order,
//! which is already a topological order because an op can only reference
//! earlier nodes. Gradients accumulate additively across fan-out. The op set
//! is deliberately small: exactly what the encoder, the decoders, and the
//! training loss need.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// Elementwise product with a single-element node.
    Scale(Var, Var),
    ScaleConst(Var, f64),
    Matmul(Var, Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Logistic(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    /// Mask already folded with the inverted-dropout scale factor.
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Nodes off the
/// differentiated path have no entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn is_scalar_like(t: &Tensor) -> bool {
    t.numel() == 1
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Elementwise sum; a single-element operand broadcasts over the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, self.rg(&[a, b]), Op::Add(a, b)))
    }

    /// Elementwise difference; a single-element operand broadcasts.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, self.rg(&[a, b]), Op::Sub(a, b)))
    }

    /// Elementwise product of same-shape tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), |x, y| x * y).map_err(|_| {
            Error::shape(
                "hadamard",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            )
        })?;
        Ok(self.push(out, self.rg(&[a, b]), Op::Hadamard(a, b)))
    }

    /// Product with a single-element node; gradient flows to both operands.
    pub fn scale(&mut self, t: Var, s: Var) -> Result<Var> {
        if !is_scalar_like(self.value(s)) {
            return Err(Error::shape("scale", format!("scale factor shape {:?}", self.value(s).shape())));
        }
        let c = self.value(s).data()[0];
        let out = self.value(t).map(|x| x * c);
        Ok(self.push(out, self.rg(&[t, s]), Op::Scale(t, s)))
    }

    pub fn scale_const(&mut self, t: Var, c: f64) -> Result<Var> {
        let out = self.value(t).map(|x| x * c);
        Ok(self.push(out, self.rg(&[t]), Op::ScaleConst(t, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, self.rg(&[a, b]), Op::Matmul(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        Ok(self.push(out, self.rg(&[a]), Op::Tanh(a)))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        Ok(self.push(out, self.rg(&[a]), Op::LeakyRelu(a, slope)))
    }

    pub fn logistic(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(logistic);
        Ok(self.push(out, self.rg(&[a]), Op::Logistic(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, self.rg(&[a]), Op::Log(a)))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        Ok(self.push(out, self.rg(&[a]), Op::Abs(a)))
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the interval and is
    /// zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        Ok(self.push(out, self.rg(&[a]), Op::Clamp(a, lo, hi)))
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.push(out, self.rg(&[a]), Op::Sum(a)))
    }

    /// Mean of all elements, rank-0 result. Empty input is a shape error.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor".to_string()));
        }
        let out = Tensor::scalar(self.value(a).sum() / n as f64);
        Ok(self.push(out, self.rg(&[a]), Op::Mean(a)))
    }

    /// Sum a rank-2 tensor along `axis` (0 collapses rows, 1 collapses cols).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || axis > 1 {
            return Err(Error::shape(
                "sum_axis",
                format!("rank {} axis {}", t.rank(), axis),
            ));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let out = if axis == 1 {
            let mut d = vec![0.0; m];
            for i in 0..m {
                d[i] = t.row(i).iter().sum();
            }
            Tensor::vector(d)
        } else {
            let mut d = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    d[j] += t.get2(i, j);
                }
            }
            Tensor::vector(d)
        };
        Ok(self.push(out, self.rg(&[a]), Op::SumAxis(a, axis)))
    }

    /// Softmax over the last axis: per row for rank 2, over the whole vector
    /// for rank 1. Rows of equal logits map to the uniform distribution.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = match t.rank() {
            1 => Tensor::vector(softmax_slice(t.data())),
            2 => {
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let mut d = Vec::with_capacity(m * n);
                for i in 0..m {
                    d.extend(softmax_slice(t.row(i)));
                }
                Tensor::new(vec![m, n], d)?
            }
            r => return Err(Error::shape("softmax", format!("rank {} unsupported", r))),
        };
        Ok(self.push(out, self.rg(&[a]), Op::Softmax(a)))
    }

    /// Concatenate along `axis`. Rank-1 parts concatenate along axis 0; rank-2
    /// parts along axis 0 (stacking rows) or axis 1 (widening columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        let rank = self.value(parts[0]).rank();
        if parts.iter().any(|p| self.value(*p).rank() != rank) {
            return Err(Error::shape("concat", "mixed ranks".to_string()));
        }
        let out = match (rank, axis) {
            (1, 0) => {
                let mut d = Vec::new();
                for p in parts {
                    d.extend_from_slice(self.value(*p).data());
                }
                Tensor::vector(d)
            }
            (2, 0) => {
                let cols = self.value(parts[0]).shape()[1];
                let mut rows = 0;
                let mut d = Vec::new();
                for p in parts {
                    let t = self.value(*p);
                    if t.shape()[1] != cols {
                        return Err(Error::shape(
                            "concat",
                            format!("column counts differ: {} vs {}", cols, t.shape()[1]),
                        ));
                    }
                    rows += t.shape()[0];
                    d.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, cols], d)?
            }
            (2, 1) => {
                let rows = self.value(parts[0]).shape()[0];
                let mut cols = 0;
                for p in parts {
                    let t = self.value(*p);
                    if t.shape()[0] != rows {
                        return Err(Error::shape(
                            "concat",
                            format!("row counts differ: {} vs {}", rows, t.shape()[0]),
                        ));
                    }
                    cols += t.shape()[1];
                }
                let mut d = vec![0.0; rows * cols];
                let mut col_off = 0;
                for p in parts {
                    let t = self.value(*p);
                    let w = t.shape()[1];
                    for i in 0..rows {
                        for j in 0..w {
                            d[i * cols + col_off + j] = t.get2(i, j);
                        }
                    }
                    col_off += w;
                }
                Tensor::new(vec![rows, cols], d)?
            }
            _ => return Err(Error::shape("concat", format!("rank {} axis {}", rank, axis))),
        };
        let rg = self.rg(parts);
        Ok(self.push(out, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || start >= end || end > t.shape()[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("shape {:?}, cols [{start}, {end})", t.shape()),
            ));
        }
        let m = t.shape()[0];
        let mut d = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            d.extend_from_slice(&t.row(i)[start..end]);
        }
        let out = Tensor::new(vec![m, end - start], d)?;
        Ok(self.push(out, self.rg(&[a]), Op::SliceCols(a, start, end)))
    }

    /// Reinterpret the same elements under a new shape (row-major order kept).
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {:?}", t.shape(), shape),
            ));
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(out, self.rg(&[a]), Op::Reshape(a)))
    }

    /// Select rows of a rank-2 tensor; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("rank {}", t.rank())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut d = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::shape("gather_rows", format!("row {} out of {}", i, m)));
            }
            d.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), n], d)?;
        Ok(self.push(out, self.rg(&[a]), Op::GatherRows(a, idx.to_vec())))
    }

    /// Scatter the rows of `a` into a zero tensor of `out_rows` rows, adding
    /// where indices repeat.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("shape {:?} with {} indices", t.shape(), idx.len()),
            ));
        }
        let n = t.shape()[1];
        let mut d = vec![0.0; out_rows * n];
        for (r, &i) in idx.iter().enumerate() {
            if i >= out_rows {
                return Err(Error::shape("scatter_add_rows", format!("row {} out of {}", i, out_rows)));
            }
            let src = t.row(r);
            let dst = &mut d[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += src[j];
            }
        }
        let out = Tensor::new(vec![out_rows, n], d)?;
        Ok(self.push(out, self.rg(&[a]), Op::ScatterAddRows(a, idx.to_vec())))
    }

    /// Inverted dropout: with the train flag off (or rate 0) this is the
    /// identity and records nothing. Kept elements are scaled by
    /// `1 / (1 - rate)` so expectations match eval mode. The mask depends only
    /// on `seed`.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Data(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, self.rg(&[a]), Op::Dropout(a, mask)))
    }

    /// Backpropagate from a single-element `loss` node, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a single element, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum_broadcast(&mut grads, *a, &g)?;
                    self.accum_broadcast(&mut grads, *b, &g)?;
                }
                Op::Sub(a, b) => {
                    self.accum_broadcast(&mut grads, *a, &g)?;
                    let neg = g.map(|x| -x);
                    self.accum_broadcast(&mut grads, *b, &neg)?;
                }
                Op::Hadamard(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        let da = g.zip(&self.nodes[b.0].value, |x, y| x * y)?;
                        self.accum(&mut grads, a, da)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = g.zip(&self.nodes[a.0].value, |x, y| x * y)?;
                        self.accum(&mut grads, b, db)?;
                    }
                }
                Op::Scale(t, s) => {
                    let (t, s) = (*t, *s);
                    let c = self.nodes[s.0].value.data()[0];
                    if self.nodes[t.0].requires_grad {
                        self.accum(&mut grads, t, g.map(|x| x * c))?;
                    }
                    if self.nodes[s.0].requires_grad {
                        let dot: f64 =
                            g.data().iter().zip(self.nodes[t.0].value.data()).map(|(x, y)| x * y).sum();
                        let mut ds = Tensor::zeros(self.nodes[s.0].value.shape());
                        ds.data_mut()[0] = dot;
                        self.accum(&mut grads, s, ds)?;
                    }
                }
                Op::ScaleConst(t, c) => {
                    let (t, c) = (*t, *c);
                    self.accum(&mut grads, t, g.map(|x| x * c))?;
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let g2 = reshape_like_matmul_out(&g, av, bv)?;
                    if self.nodes[a.0].requires_grad {
                        let bt = as_2d_rhs(bv)?.transpose()?;
                        let da2 = g2.matmul(&bt)?;
                        self.accum(&mut grads, a, reshape_to(&da2, av.shape())?)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = as_2d_lhs(av)?.transpose()?;
                        let db2 = at.matmul(&g2)?;
                        self.accum(&mut grads, b, reshape_to(&db2, bv.shape())?)?;
                    }
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let y = &self.nodes[id].value;
                    let da = g.zip(y, |gx, yx| gx * (1.0 - yx * yx))?;
                    self.accum(&mut grads, a, da)?;
                }
                Op::LeakyRelu(a, slope) => {
                    let (a, slope) = (*a, *slope);
                    let x = &self.nodes[a.0].value;
                    let da = g.zip(x, |gx, xv| if xv >= 0.0 { gx } else { gx * slope })?;
                    self.accum(&mut grads, a, da)?;
                }
                Op::Logistic(a) => {
                    let a = *a;
                    let y = &self.nodes[id].value;
                    let da = g.zip(y, |gx, yx| gx * yx * (1.0 - yx))?;
                    self.accum(&mut grads, a, da)?;
                }
                Op::Log(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let da = g.zip(x, |gx, xv| gx / xv)?;
                    self.accum(&mut grads, a, da)?;
                }
                Op::Abs(a) => {
                    let a = *a;
                    let x = &self.nodes[a.0].value;
                    let da = g.zip(x, |gx, xv| gx * sign(xv))?;
                    self.accum(&mut grads, a, da)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let x = &self.nodes[a.0].value;
                    let da = g.zip(x, |gx, xv| if xv >= lo && xv <= hi { gx } else { 0.0 })?;
                    self.accum(&mut grads, a, da)?;
                }
                Op::Sum(a) => {
                    let a = *a;
                    let go = g.data()[0];
                    let da = Tensor::filled(self.nodes[a.0].value.shape(), go);
                    self.accum(&mut grads, a, da)?;
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.numel() as f64;
                    let da = Tensor::filled(self.nodes[a.0].value.shape(), g.data()[0] / n);
                    self.accum(&mut grads, a, da)?;
                }
                Op::SumAxis(a, axis) => {
                    let (a, axis) = (*a, *axis);
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let (m, n) = (shape[0], shape[1]);
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = if axis == 1 { g.data()[i] } else { g.data()[j] };
                        }
                    }
                    self.accum(&mut grads, a, Tensor::new(shape, d)?)?;
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let y = &self.nodes[id].value;
                    let da = softmax_backward(y, &g)?;
                    self.accum(&mut grads, a, da)?;
                }
                Op::Concat(parts, axis) => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let rank = self.nodes[parts[0].0].value.rank();
                    match (rank, axis) {
                        (1, 0) | (2, 0) => {
                            let mut off = 0;
                            for p in parts {
                                let len = self.nodes[p.0].value.numel();
                                if self.nodes[p.0].requires_grad {
                                    let shape = self.nodes[p.0].value.shape().to_vec();
                                    let d = g.data()[off..off + len].to_vec();
                                    self.accum(&mut grads, p, Tensor::new(shape, d)?)?;
                                }
                                off += len;
                            }
                        }
                        (2, 1) => {
                            let rows = self.nodes[parts[0].0].value.shape()[0];
                            let total = g.shape()[1];
                            let mut col_off = 0;
                            for p in parts {
                                let w = self.nodes[p.0].value.shape()[1];
                                if self.nodes[p.0].requires_grad {
                                    let mut d = Vec::with_capacity(rows * w);
                                    for i in 0..rows {
                                        let row = &g.data()[i * total..(i + 1) * total];
                                        d.extend_from_slice(&row[col_off..col_off + w]);
                                    }
                                    self.accum(&mut grads, p, Tensor::new(vec![rows, w], d)?)?;
                                }
                                col_off += w;
                            }
                        }
                        _ => unreachable!("concat only records supported layouts"),
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (a, start, end) = (*a, *start, *end);
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let (m, n) = (shape[0], shape[1]);
                    let w = end - start;
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..w {
                            d[i * n + start + j] = g.data()[i * w + j];
                        }
                    }
                    self.accum(&mut grads, a, Tensor::new(shape, d)?)?;
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let da = Tensor::new(shape, g.data().to_vec())?;
                    self.accum(&mut grads, a, da)?;
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let n = shape[1];
                    let mut d = vec![0.0; shape[0] * n];
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g.data()[r * n..(r + 1) * n];
                        let dst = &mut d[i * n..(i + 1) * n];
                        for j in 0..n {
                            dst[j] += src[j];
                        }
                    }
                    self.accum(&mut grads, a, Tensor::new(shape, d)?)?;
                }
                Op::ScatterAddRows(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let n = shape[1];
                    let mut d = Vec::with_capacity(idx.len() * n);
                    for &i in &idx {
                        d.extend_from_slice(&g.data()[i * n..(i + 1) * n]);
                    }
                    self.accum(&mut grads, a, Tensor::new(shape, d)?)?;
                }
                Op::Dropout(a, mask) => {
                    let a = *a;
                    let data: Vec<f64> =
                        g.data().iter().zip(mask).map(|(&gx, &m)| gx * m).collect();
                    let da = Tensor::new(g.shape().to_vec(), data)?;
                    self.accum(&mut grads, a, da)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    /// Like [`Tape::accum`] but collapses the gradient by summation when the
    /// target was a broadcast single-element operand.
    fn accum_broadcast(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let target = &self.nodes[v.0].value;
        let reduced = if target.shape() == g.shape() {
            g.clone()
        } else if is_scalar_like(target) {
            let mut t = Tensor::zeros(target.shape());
            t.data_mut()[0] = g.sum();
            t
        } else {
            return Err(Error::shape(
                "backward_add",
                format!("{:?} vs {:?}", target.shape(), g.shape()),
            ));
        };
        self.accum(grads, v, reduced)
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn softmax_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let row_len = *y.shape().last().expect("softmax output has a last axis");
    let mut d = vec![0.0; y.numel()];
    for r in 0..y.numel() / row_len {
        let ys = &y.data()[r * row_len..(r + 1) * row_len];
        let gs = &g.data()[r * row_len..(r + 1) * row_len];
        let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for j in 0..row_len {
            d[r * row_len + j] = ys[j] * (gs[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), d)
}

fn broadcast_zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip(b, f);
    }
    if is_scalar_like(a) {
        let av = a.data()[0];
        return Ok(b.map(|x| f(av, x)));
    }
    if is_scalar_like(b) {
        let bv = b.data()[0];
        return Ok(a.map(|x| f(x, bv)));
    }
    Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
}

fn as_2d_lhs(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [_, _] => Ok(t.clone()),
        [k] => Tensor::matrix(1, *k, t.data().to_vec()),
        _ => Err(Error::shape("matmul", "rank > 2".to_string())),
    }
}

fn as_2d_rhs(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [_, _] => Ok(t.clone()),
        [k] => Tensor::matrix(*k, 1, t.data().to_vec()),
        _ => Err(Error::shape("matmul", "rank > 2".to_string())),
    }
}

fn reshape_like_matmul_out(g: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let m = if a.rank() == 2 { a.shape()[0] } else { 1 };
    let n = if b.rank() == 2 { b.shape()[1] } else { 1 };
    Tensor::matrix(m, n, g.data().to_vec())
}

fn reshape_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), t.data().to_vec())
}

// --- gradient checking ---------------------------------------------------

/// Central finite differences of a scalar-valued builder `f` with step `h`,
/// one tensor of partials per parameter.
pub fn finite_difference<F>(params: &[Tensor], h: f64, f: &mut F) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..work.len() {
        let mut g = Tensor::zeros(work[pi].shape());
        for j in 0..work[pi].numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let fp = eval_scalar(&work, f)?;
            work[pi].data_mut()[j] = orig - h;
            let fm = eval_scalar(&work, f)?;
            work[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

fn eval_scalar<F>(params: &[Tensor], f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Gradients of `f` at `params` by one forward pass and one backward pass.
pub fn analytic_gradients<F>(params: &[Tensor], f: &mut F) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error `|a - n| / max(|a|, |n|, 1)` maximized over all coordinates.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor], tol: f64) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::shape("compare_gradients", "parameter count mismatch".to_string()));
    }
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.shape() != n.shape() {
            return Err(Error::shape(
                "compare_gradients",
                format!("param {}: {:?} vs {:?}", pi, a.shape(), n.shape()),
            ));
        }
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((pi, j));
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, tol })
}

/// Check analytic gradients of `f` against central finite differences.
pub fn grad_check<F>(params: &[Tensor], h: f64, tol: f64, f: &mut F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(params, f)?;
    let numeric = finite_difference(params, h, f)?;
    compare_gradients(&analytic, &numeric, tol)
}
