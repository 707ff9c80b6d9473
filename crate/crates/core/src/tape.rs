//! Define-by-run reverse-mode differentiation.
//!
//! Every forward computation appends nodes to a [`Tape`]. Nodes are stored in
//! creation order, so inputs always precede the operations that consume them,
//! and [`Tape::backward`] visits each node exactly once walking the list in
//! reverse. A fresh tape is built for every forward pass.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module: receives the
/// output gradient and the input values, returns one gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MulConst(Var, Tensor),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Unfold { x: Var, group: usize, width: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Index(Var, usize),
    Softmax(Var),
    SoftmaxXent { logits: Var, probs: Tensor, targets: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn as_matrix(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(format!("{op}: expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions of {:?} and {:?} disagree",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[d]` bias to every row of an `[… × d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..value.rows() {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale(x, c))
    }

    /// Multiplies `x` by a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(format!("scale_by: {:?} is not a scalar", self.shape(s))));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, rg, Op::ScaleBy(x, s)))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(x), &mask)?;
        let data = self.value(x).data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(mask.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::MulConst(x, mask)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, rg, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, rg, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, rg, Op::Relu(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, rg, Op::Clamp(x, lo, hi))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = as_matrix("slice_cols", self.value(x))?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("slice_cols {start}..{} out of {n} columns", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, len], data)?, rg, Op::SliceCols { x, start }))
    }

    /// Selects rows of a matrix (repeats allowed). Used for embedding lookup,
    /// time-step selection and reordering.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix("gather_rows", self.value(x))?;
        if index.is_empty() {
            return Err(Error::dim("gather_rows: empty index"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::Index(format!("gather_rows: row {i} out of {m}")));
            }
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![index.len(), n], data)?,
            rg,
            Op::GatherRows { x, index: index.to_vec() },
        ))
    }

    /// Sliding windows over groups of rows. `x` is `[N·group × e]`; the output
    /// is `[N·(group − width + 1) × width·e]`, each row the concatenation of
    /// `width` consecutive rows from the same group.
    pub fn unfold(&mut self, x: Var, group: usize, width: usize) -> Result<Var> {
        let (m, e) = as_matrix("unfold", self.value(x))?;
        if group == 0 || m % group != 0 || width == 0 || width > group {
            return Err(Error::dim(format!("unfold: {m} rows, group {group}, width {width}")));
        }
        let n = m / group;
        let positions = group - width + 1;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * positions * width * e);
        for g in 0..n {
            for p in 0..positions {
                let start = (g * group + p) * e;
                data.extend_from_slice(&src[start..start + width * e]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n * positions, width * e], data)?,
            rg,
            Op::Unfold { x, group, width },
        ))
    }

    /// Column-wise max over consecutive groups of `group` rows:
    /// `[N·group × c] → [N × c]`. Ties resolve to the first row.
    pub fn max_pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, c) = as_matrix("max_pool_rows", self.value(x))?;
        if group == 0 || m % group != 0 {
            return Err(Error::dim(format!("max_pool_rows: {m} rows not divisible into groups of {group}")));
        }
        let n = m / group;
        let src = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0; n * c];
        for g in 0..n {
            for r in g * group..(g + 1) * group {
                for j in 0..c {
                    let v = src[r * c + j];
                    if v > data[g * c + j] {
                        data[g * c + j] = v;
                        argmax[g * c + j] = r;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], data)?, rg, Op::MaxPool { x, argmax }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if i >= n {
            return Err(Error::Index(format!("index {i} out of {n}")));
        }
        let value = Tensor::scalar(self.value(x).data()[i]);
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Index(x, i)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(value, rg, Op::Softmax(x))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, v) = as_matrix("softmax_xent", self.value(logits))?;
        if targets.len() != b {
            return Err(Error::dim(format!("softmax_xent: {b} rows but {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {bad} out of range for {v} classes")));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            rg,
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// variance (`ε = 1e-5` under the root), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d < 2 {
            return Err(Error::dim(format!("layer_norm needs at least 2 features, got {:?}", self.shape(x))));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} vs features {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let mut xhat = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(xhat.rows());
        for r in 0..xhat.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((v, gv), bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gv + bv;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    /// Like `acc` but builds the delta in place, avoiding an allocation when
    /// the slot already exists.
    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc_with(grads, *a, |ga| matmul_a_bt_into(g.data(), bv, ga, m, k, n));
                self.acc_with(grads, *b, |gb| matmul_at_b_into(av, g.data(), gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * x;
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for ((o, gv), x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * x;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                let d = g.last_dim();
                self.acc_with(grads, *b, |gb| {
                    for r in 0..g.rows() {
                        for (o, gv) in gb.iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    debug_assert_eq!(gb.len(), d);
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.map(|v| v * c)),
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                self.acc(grads, *x, g.map(|v| v * c));
                let ds: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                self.acc(grads, *s, Tensor::full(self.shape(*s), ds));
            }
            Op::MulConst(x, mask) => {
                self.acc_with(grads, *x, |gx| {
                    for ((o, gv), m) in gx.iter_mut().zip(g.data()).zip(mask.data()) {
                        *o += gv * m;
                    }
                });
            }
            Op::Sigmoid(x) => self.acc_with(grads, *x, |gx| {
                for ((o, gv), s) in gx.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * s * (1.0 - s);
                }
            }),
            Op::Tanh(x) => self.acc_with(grads, *x, |gx| {
                for ((o, gv), t) in gx.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * (1.0 - t * t);
                }
            }),
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.acc_with(grads, *x, |gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(g.data()).zip(xv.data()) {
                        if *v > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                self.acc_with(grads, *x, |gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(g.data()).zip(xv.data()) {
                        if *v > *lo && *v < *hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.acc_with(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g.data()[o * row + offset..o * row + offset + chunk];
                            for (d, s) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = g.shape()[1];
                self.acc_with(grads, *x, |gx| {
                    for i in 0..g.shape()[0] {
                        for (d, s) in gx[i * n + start..i * n + start + len].iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let n = self.shape(*x)[1];
                self.acc_with(grads, *x, |gx| {
                    for (r, &i) in index.iter().enumerate() {
                        for (d, s) in gx[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Unfold { x, group, width } => {
                let e = self.shape(*x)[1];
                let positions = group - width + 1;
                self.acc_with(grads, *x, |gx| {
                    for r in 0..g.shape()[0] {
                        let (grp, p) = (r / positions, r % positions);
                        let start = (grp * group + p) * e;
                        for (d, s) in gx[start..start + width * e].iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                let c = g.last_dim();
                self.acc_with(grads, *x, |gx| {
                    for (k, &r) in argmax.iter().enumerate() {
                        gx[r * c + k % c] += g.data()[k];
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.acc_with(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += gv));
            }
            Op::Index(x, i) => {
                let gv = g.item();
                self.acc_with(grads, *x, |gx| gx[*i] += gv);
            }
            Op::Softmax(x) => {
                let d = y.last_dim();
                self.acc_with(grads, *x, |gx| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxXent { logits, probs, targets } => {
                let scale = g.item() / targets.len() as f64;
                let v = probs.last_dim();
                self.acc_with(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for (j, p) in probs.row(r).iter().enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = xhat.last_dim();
                let gv = self.value(*gain).data();
                self.acc_with(grads, *gain, |gg| {
                    for r in 0..xhat.rows() {
                        for ((o, a), b) in gg.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += a * b;
                        }
                    }
                });
                self.acc_with(grads, *bias, |gb| {
                    for r in 0..g.rows() {
                        for (o, a) in gb.iter_mut().zip(g.row(r)) {
                            *o += a;
                        }
                    }
                });
                self.acc_with(grads, *x, |gx| {
                    let n = d as f64;
                    for r in 0..xhat.rows() {
                        let xh = xhat.row(r);
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                });
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let deltas = backward(g, &values);
                debug_assert_eq!(deltas.len(), inputs.len());
                for (&v, delta) in inputs.iter().zip(deltas) {
                    self.acc(grads, v, delta);
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut t = Tape::new();
        let i = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let v = t.constant(m(2, 1, &[3.0, 4.0]));
        let out = t.matmul(i, v).unwrap();
        assert_eq!(t.value(out).data(), &[3.0, 4.0]);

        let a = t.constant(m(1, 2, &[1.0, 2.0]));
        let b = t.constant(m(2, 1, &[3.0, 4.0]));
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn pointwise_definitions() {
        let mut t = Tape::new();
        let z = t.param(Tensor::vector(vec![0.0]));
        let s = t.sigmoid(z);
        let th = t.tanh(z);
        assert_eq!(t.value(s).item(), 0.5);
        assert_eq!(t.value(th).item(), 0.0);

        let x = t.param(Tensor::vector(vec![-2.5]));
        let r = t.relu(x);
        assert_eq!(t.value(r).item(), 0.0);
        let loss = t.sum(r);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn elementwise_shape_mismatch_is_dimension_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(t.mul(a, b), Err(Error::Dimension(_))));
        assert!(matches!(t.concat(&[a, b], 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_xent_uniform_and_confident() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[1, 4]));
        let loss = t.softmax_xent(l, &[2]).unwrap();
        assert!((t.value(loss).item() - 4f64.ln()).abs() < 1e-15);

        let l = t.constant(m(1, 2, &[10.0, -10.0]));
        let loss = t.softmax_xent(l, &[0]).unwrap();
        // ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        assert!((t.value(loss).item() - expected).abs() / expected < 1e-6);
        assert!((expected - 2.06e-9).abs() < 1e-11);

        assert!(matches!(t.softmax_xent(l, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn layer_norm_constant_and_pair() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::full(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let x = t.constant(Tensor::full(&[1, 4], 1.0));
        let y = t.layer_norm(x, g, b).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);

        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(m(1, 2, &[-1.0, 1.0]));
        let y = t.layer_norm(x, g, b).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((t.value(y).data()[0] + expect).abs() < 1e-15);
        assert!((t.value(y).data()[1] - expect).abs() < 1e-15);

        let g1 = t.constant(Tensor::full(&[1], 1.0));
        let x1 = t.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(t.layer_norm(x1, g1, g1), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 3]));
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = t.param(Tensor::vector(vec![3.0, 4.0]));
        let prod = t.mul(c, p).unwrap();
        let loss = t.sum(prod);
        let g = t.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }
}
