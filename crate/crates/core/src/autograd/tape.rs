use rand::Rng;

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{AutogradError, Gradients, ParamId, ParamStore, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f32),
    Softmax(Var),
    Dropout(Var, Vec<f32>),
    CrossEntropy(Var, Vec<usize>),
    Attend(Var, Vec<Var>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// Empty for parameters, whose value lives in the store.
    value: Tensor,
    needs_grad: bool,
}

/// Probabilities are clamped here before taking the log.
const PROB_FLOOR: f32 = f32::MIN_POSITIVE;

/// A single-threaded computation graph over a borrowed [`ParamStore`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, detail: String) -> AutogradError {
    AutogradError::Shape { op, detail }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], backward_done: false }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.iter_mut().for_each(|v| *v = None);
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.value(id),
            _ => &self.nodes[v.0].value,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => self.needs(*a) || self.needs(*b),
            Op::Scale(a, _)
            | Op::SliceCols(a, _)
            | Op::Gather(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Softmax(a)
            | Op::Dropout(a, _)
            | Op::CrossEntropy(a, _)
            | Op::Sum(a) => self.needs(*a),
            Op::Concat(xs) => xs.iter().any(|x| self.needs(*x)),
            Op::Attend(w, xs) => self.needs(*w) || xs.iter().any(|x| self.needs(*x)),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Input, t, "input")
    }

    /// The leaf for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: Tensor::zeros(0, 0), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        matmul_acc(ta.data(), tb.data(), &mut out, n, k, m);
        self.push(Op::MatMul(a, b), Tensor::from_vec(n, m, out), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(Op::Add(a, b), t, "add")
    }

    /// Adds the `1 x c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", ta.shape(), tb.shape())));
        }
        let c = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % c]).collect();
        let t = Tensor::from_vec(ta.rows(), c, data);
        self.push(Op::AddRow(a, bias), t, "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(Op::Mul(a, b), t, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::from_vec(ta.rows(), ta.cols(), ta.data().iter().map(|x| x * s).collect());
        self.push(Op::Scale(a, s), t, "scale")
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(shape_err("concat", "no operands".into()));
        };
        let rows = self.value(first).rows();
        if let Some(bad) = xs.iter().find(|&&x| self.value(x).rows() != rows) {
            return Err(shape_err("concat", format!("{} rows vs {:?}", rows, self.value(*bad).shape())));
        }
        let cols: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        self.push(Op::Concat(xs.to_vec()), Tensor::from_vec(rows, cols, data), "concat")
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(shape_err("slice_cols", format!("{start}..{} of {:?}", start + len, ta.shape())));
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let t = Tensor::from_vec(ta.rows(), len, data);
        self.push(Op::SliceCols(a, start), t, "slice_cols")
    }

    /// Row lookup: output row `i` is row `indices[i]` of `a`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * ta.cols());
        for &i in indices {
            if i >= ta.rows() {
                return Err(AutogradError::Index { op: "gather", index: i, rows: ta.rows() });
            }
            data.extend_from_slice(ta.row_slice(i));
        }
        let t = Tensor::from_vec(indices.len(), ta.cols(), data);
        self.push(Op::Gather(a, indices.to_vec()), t, "gather")
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let ta = self.value(a);
        Tensor::from_vec(ta.rows(), ta.cols(), ta.data().iter().map(|&x| f(x)).collect())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f32::tanh);
        self.push(Op::Tanh(a), t, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, sigmoid);
        self.push(Op::Sigmoid(a), t, "sigmoid")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        let t = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), t, "leaky_relu")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries get probability 0 and a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(m) = mask {
            if m.len() != ta.len() {
                return Err(shape_err("softmax", format!("mask of {} for {:?}", m.len(), ta.shape())));
            }
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = ta.row_slice(r);
            let base = r * cols;
            let max = (0..cols).filter(|&c| keep(base + c)).map(|c| row[c]).fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if keep(base + c) {
                    let e = (row[c] - max).exp();
                    out[base + c] = e;
                    sum += e;
                }
            }
            out[base..base + cols].iter_mut().for_each(|v| *v /= sum);
        }
        self.push(Op::Softmax(a), Tensor::from_vec(rows, cols, out), "softmax")
    }

    /// Inverted dropout. With `train == false` or `p == 0` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f32, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutogradError::DropoutRate(p));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f32> = (0..n).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep }).collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(Op::Dropout(a, mask), t, "dropout")
    }

    /// `sum_r -ln p[r, targets[r]]` as a `1 x 1` tensor.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let tp = self.value(probs);
        if targets.len() != tp.rows() {
            return Err(shape_err("cross_entropy", format!("{} targets for {:?}", targets.len(), tp.shape())));
        }
        let mut loss = 0.0f32;
        for (r, &t) in targets.iter().enumerate() {
            if t >= tp.cols() {
                return Err(AutogradError::Index { op: "cross_entropy", index: t, rows: tp.cols() });
            }
            loss -= tp.get(r, t).max(PROB_FLOOR).ln();
        }
        self.push(Op::CrossEntropy(probs, targets.to_vec()), Tensor::scalar(loss), "cross_entropy")
    }

    /// Attention pooling: `out[b] = sum_j weights[b, j] * values[j][b]`.
    pub fn attend(&mut self, weights: Var, values: &[Var]) -> Result<Var> {
        let tw = self.value(weights);
        if tw.cols() != values.len() || values.is_empty() {
            return Err(shape_err("attend", format!("weights {:?} for {} values", tw.shape(), values.len())));
        }
        let (rows, dim) = (tw.rows(), self.value(values[0]).cols());
        for &v in values {
            if self.value(v).shape() != [rows, dim] {
                return Err(shape_err("attend", format!("value {:?}, expected {:?}", self.value(v).shape(), [rows, dim])));
            }
        }
        let mut out = vec![0.0f32; rows * dim];
        for (j, &v) in values.iter().enumerate() {
            let tv = self.value(v);
            for r in 0..rows {
                let w = tw.get(r, j);
                if w == 0.0 {
                    continue;
                }
                for (o, x) in out[r * dim..(r + 1) * dim].iter_mut().zip(tv.row_slice(r)) {
                    *o += w * x;
                }
            }
        }
        self.push(Op::Attend(weights, values.to_vec()), Tensor::from_vec(rows, dim, out), "attend")
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Reverse pass from a `1 x 1` loss. Gradients of parameters the loss
    /// depends on are returned; the tape must be reset before the next
    /// backward.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(AutogradError::BackwardTwice);
        }
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(AutogradError::NonScalarLoss(shape[0], shape[1]));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut out = Gradients::new(self.params.len());
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(AutogradError::NonFinite { op: "backward" });
            }
            let node = &self.nodes[idx];
            let y = &node.value;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                let len = self.value(v).len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let slot = &mut out.grads[id.0];
                    match slot {
                        Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    acc(*a, &mut |s| matmul_nt_acc(&g, tb.data(), s, n, k, m));
                    acc(*b, &mut |s| matmul_tn_acc(ta.data(), &g, s, n, k, m));
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, d)| *x += d));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(x, d)| *x += d));
                }
                Op::AddRow(a, bias) => {
                    let c = y.cols();
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, d)| *x += d));
                    acc(*bias, &mut |s| {
                        for (i, d) in g.iter().enumerate() {
                            s[i % c] += d;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(*a, &mut |s| {
                        for ((x, d), o) in s.iter_mut().zip(&g).zip(tb.data()) {
                            *x += d * o;
                        }
                    });
                    acc(*b, &mut |s| {
                        for ((x, d), o) in s.iter_mut().zip(&g).zip(ta.data()) {
                            *x += d * o;
                        }
                    });
                }
                Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, d)| *x += d * k)),
                Op::Concat(xs) => {
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut offset = 0;
                    for &x in xs {
                        let w = self.value(x).cols();
                        acc(x, &mut |s| {
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + w];
                                s[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, w, full) = (y.rows(), y.cols(), self.value(*a).cols());
                    acc(*a, &mut |s| {
                        for r in 0..rows {
                            let dst = &mut s[r * full + start..r * full + start + w];
                            dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Gather(a, indices) => {
                    let c = y.cols();
                    let ta_is_param = matches!(self.nodes[a.0].op, Op::Param(_));
                    let scatter = |s: &mut [f32]| {
                        for (r, &i) in indices.iter().enumerate() {
                            s[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(a, b)| *a += b);
                        }
                    };
                    if let (true, Op::Param(id)) = (ta_is_param, &self.nodes[a.0].op) {
                        // Embedding tables: scatter straight into the parameter gradient.
                        let len = self.params.value(*id).len();
                        let slot = out.grads[id.0].get_or_insert_with(|| vec![0.0; len]);
                        scatter(slot);
                    } else {
                        acc(*a, &mut |s| scatter(s));
                    }
                }
                Op::Tanh(a) => acc(*a, &mut |s| {
                    for ((x, d), t) in s.iter_mut().zip(&g).zip(y.data()) {
                        *x += d * (1.0 - t * t);
                    }
                }),
                Op::Sigmoid(a) => acc(*a, &mut |s| {
                    for ((x, d), t) in s.iter_mut().zip(&g).zip(y.data()) {
                        *x += d * t * (1.0 - t);
                    }
                }),
                Op::LeakyRelu(a, slope) => {
                    let ta = self.value(*a);
                    acc(*a, &mut |s| {
                        for ((x, d), i) in s.iter_mut().zip(&g).zip(ta.data()) {
                            *x += if *i > 0.0 { *d } else { slope * d };
                        }
                    })
                }
                Op::Softmax(a) => {
                    let cols = y.cols();
                    acc(*a, &mut |s| {
                        for r in 0..y.rows() {
                            let p = y.row_slice(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f32 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                s[r * cols + c] += p[c] * (gr[c] - dot);
                            }
                        }
                    })
                }
                Op::Dropout(a, mask) => acc(*a, &mut |s| {
                    for ((x, d), m) in s.iter_mut().zip(&g).zip(mask) {
                        *x += d * m;
                    }
                }),
                Op::CrossEntropy(p, targets) => {
                    let tp = self.value(*p);
                    let cols = tp.cols();
                    acc(*p, &mut |s| {
                        for (r, &t) in targets.iter().enumerate() {
                            let pv = tp.get(r, t).max(PROB_FLOOR);
                            s[r * cols + t] -= g[0] / pv;
                        }
                    })
                }
                Op::Attend(w, values) => {
                    let tw = self.value(*w);
                    let (rows, dim) = (y.rows(), y.cols());
                    let n = values.len();
                    acc(*w, &mut |s| {
                        for (j, &v) in values.iter().enumerate() {
                            let tv = self.value(v);
                            for r in 0..rows {
                                let dot: f32 =
                                    g[r * dim..(r + 1) * dim].iter().zip(tv.row_slice(r)).map(|(a, b)| a * b).sum();
                                s[r * n + j] += dot;
                            }
                        }
                    });
                    for (j, &v) in values.iter().enumerate() {
                        acc(v, &mut |s| {
                            for r in 0..rows {
                                let wv = tw.get(r, j);
                                for (x, d) in s[r * dim..(r + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                                    *x += wv * d;
                                }
                            }
                        });
                    }
                }
                Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            }
        }
        Ok(out)
    }
}
