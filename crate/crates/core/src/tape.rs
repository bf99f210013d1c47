//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends one node
//! holding its output value and enough bookkeeping to apply its local
//! backward rule; [`Tape::backward`] replays the nodes in reverse order.
//! Parameters and large constant buffers enter the tape by reference so a
//! forward pass never copies them.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat { a: Var, b: Var, axis: usize },
    Slice { input: Var, start: usize },
    Row { input: Var, row: usize },
    StackRows(Vec<Var>),
    KMaxAvgPool { input: Var, selected: Vec<Vec<usize>> },
    Sum(Var),
    Pick { input: Var, index: usize },
    MaskedNll { input: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    SumSquares(Vec<Var>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Kind selector for [`Tape::pointwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    Scale(f64),
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    check_finite: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl<'a> Tape<'a> {
    /// NaN/Inf checking follows the build profile: on in debug builds.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, out: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !out.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Value::Owned(out), op, rg))
    }

    /// Owned leaf, e.g. an input or a test parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Value::Owned(value), Op::Leaf, requires_grad)
    }

    /// Trainable parameter entered by reference; its gradient is reported
    /// under `param_id` by [`Gradients::by_param`].
    pub fn param(&mut self, value: &'a Tensor, param_id: usize) -> Var {
        let v = self.push(Value::Borrowed(value), Op::Leaf, true);
        self.nodes[v.0].param = Some(param_id);
        v
    }

    /// Constant buffer entered by reference. Never receives a gradient.
    pub fn constant(&mut self, value: &'a Tensor) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// `[m×n] · [n×p] → [m×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, n, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * p];
        matmul_into(ta.data(), tb.data(), &mut out, m, n, p);
        let out = Tensor::new(vec![m, p], out)?;
        self.push_op("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `[m×n] · [n] → [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        if tw.rank() != 2 || tx.rank() != 1 || tw.shape()[1] != tx.len() {
            return Err(dim_err("matvec", tw.shape(), tx.shape()));
        }
        let (m, n) = (tw.shape()[0], tw.shape()[1]);
        let wd = tw.data();
        let xd = tx.data();
        let out: Vec<f64> = (0..m)
            .map(|i| dot(&wd[i * n..(i + 1) * n], xd))
            .collect();
        self.push_op("matvec", Tensor::vector(out), Op::MatVec(w, x), &[w, x])
    }

    /// `xᵀ · W` for `x: [n]`, `W: [n×p]`, giving `[p]`.
    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.rank() != 1 || tw.shape()[0] != tx.len() {
            return Err(dim_err("vecmat", tx.shape(), tw.shape()));
        }
        let (n, p) = (tw.shape()[0], tw.shape()[1]);
        let mut out = vec![0.0; p];
        let wd = tw.data();
        for (i, &xi) in tx.data().iter().enumerate().take(n) {
            if xi == 0.0 {
                continue;
            }
            axpy(xi, &wd[i * p..(i + 1) * p], &mut out);
        }
        self.push_op("vecmat", Tensor::vector(out), Op::VecMat(x, w), &[x, w])
    }

    // ── pointwise ──────────────────────────────────────────────────────

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push_op("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.push_op("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push_op("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.unary(a, |x| x * s);
        self.push_op("scale", out, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a constant (non-differentiated) factor.
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != factor.len() {
            return Err(dim_err("mul_const", ta.shape(), &[factor.len()]));
        }
        let data = ta.data().iter().zip(&factor).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op("mul_const", out, Op::MulConst(a, factor), &[a])
    }

    /// Inverted dropout: in training mode each entry survives with
    /// probability `1 - rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Outside training mode this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, sigmoid);
        self.push_op("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, f64::tanh);
        self.push_op("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, f64::ln);
        self.push_op("log", out, Op::Log(a), &[a])
    }

    /// Dispatch for the elementwise family; `args` holds one or two inputs.
    pub fn pointwise(&mut self, kind: Pointwise, args: &[Var]) -> Result<Var> {
        let need = match kind {
            Pointwise::Add | Pointwise::Sub | Pointwise::Mul => 2,
            _ => 1,
        };
        if args.len() != need {
            return Err(Error::Usage(format!(
                "{kind:?} takes {need} argument(s), got {}",
                args.len()
            )));
        }
        match kind {
            Pointwise::Sigmoid => self.sigmoid(args[0]),
            Pointwise::Tanh => self.tanh(args[0]),
            Pointwise::Add => self.add(args[0], args[1]),
            Pointwise::Sub => self.sub(args[0], args[1]),
            Pointwise::Mul => self.mul(args[0], args[1]),
            Pointwise::Scale(s) => self.scale(args[0], s),
        }
    }

    // ── normalisation ──────────────────────────────────────────────────

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 || ta.is_empty() {
            return Err(Error::Dimension(format!(
                "softmax needs a non-empty vector, got {:?}",
                ta.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        softmax_in_place(&mut data);
        self.push_op("softmax", Tensor::vector(data), Op::Softmax(a), &[a])
    }

    /// Softmax where the `excluded` positions are treated as `-inf` logits;
    /// their output weight is exactly zero.
    pub fn masked_softmax(&mut self, a: Var, excluded: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 {
            return Err(Error::Dimension(format!(
                "masked_softmax needs a vector, got {:?}",
                ta.shape()
            )));
        }
        let n = ta.len();
        let mut keep = vec![true; n];
        for &e in excluded {
            if e < n {
                keep[e] = false;
            }
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Memory("no unmasked entries left for softmax".into()));
        }
        let max = ta
            .data()
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut data: Vec<f64> = ta
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { (v - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= total);
        // Softmax backward only needs the output, which is zero where masked.
        self.push_op("masked_softmax", Tensor::vector(data), Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 || ta.is_empty() {
            return Err(Error::Dimension(format!(
                "log_softmax needs a non-empty vector, got {:?}",
                ta.shape()
            )));
        }
        let max = ta.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + ta.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let data = ta.data().iter().map(|v| v - lse).collect();
        self.push_op("log_softmax", Tensor::vector(data), Op::LogSoftmax(a), &[a])
    }

    // ── structure ──────────────────────────────────────────────────────

    /// Concatenate along `axis` (0 for vectors; 0 or 1 for matrices).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match (ta.rank(), tb.rank(), axis) {
            (1, 1, 0) => {
                let mut d = ta.data().to_vec();
                d.extend_from_slice(tb.data());
                Tensor::vector(d)
            }
            (2, 2, 0) if ta.cols() == tb.cols() => {
                let mut d = ta.data().to_vec();
                d.extend_from_slice(tb.data());
                Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], d)?
            }
            (2, 2, 1) if ta.rows() == tb.rows() => {
                let mut d = Vec::with_capacity(ta.len() + tb.len());
                for r in 0..ta.rows() {
                    d.extend_from_slice(ta.row(r));
                    d.extend_from_slice(tb.row(r));
                }
                Tensor::new(vec![ta.rows(), ta.cols() + tb.cols()], d)?
            }
            _ => return Err(dim_err("concat", ta.shape(), tb.shape())),
        };
        self.push_op("concat", out, Op::Concat { a, b, axis }, &[a, b])
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 || start + len > ta.len() {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of range for {:?}",
                start + len,
                ta.shape()
            )));
        }
        let out = Tensor::vector(ta.data()[start..start + len].to_vec());
        self.push_op("slice", out, Op::Slice { input: a, start }, &[a])
    }

    /// One row of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || row >= ta.rows() {
            return Err(Error::Dimension(format!(
                "row {row} out of range for {:?}",
                ta.shape()
            )));
        }
        let out = Tensor::vector(ta.row(row).to_vec());
        self.push_op("row", out, Op::Row { input: a, row }, &[a])
    }

    /// Stack equally sized vectors into a `[len(rows) × n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(first) = rows.first() else {
            return Err(Error::Dimension("stack_rows of nothing".into()));
        };
        let n = self.value(*first).len();
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.len() != n {
                return Err(dim_err("stack_rows", &[n], t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        self.push_op("stack_rows", out, Op::StackRows(rows.to_vec()), rows)
    }

    /// Per column of a `[T×H]` matrix, the mean of its `min(k, T)` largest
    /// entries. Ties go to the earliest row.
    pub fn kmax_avg_pool(&mut self, a: Var, k: usize) -> Result<Var> {
        let ta = self.value(a);
        if k == 0 {
            return Err(Error::Config("k-max pooling needs k >= 1".into()));
        }
        if ta.rank() != 2 || ta.rows() == 0 {
            return Err(Error::Dimension(format!(
                "k-max pooling needs a non-empty [T×H] matrix, got {:?}",
                ta.shape()
            )));
        }
        let (t, h) = (ta.rows(), ta.cols());
        let keep = k.min(t);
        let mut out = vec![0.0; h];
        let mut selected = Vec::with_capacity(h);
        let mut order: Vec<usize> = Vec::with_capacity(t);
        for (j, slot) in out.iter_mut().enumerate() {
            order.clear();
            order.extend(0..t);
            // Stable sort keeps earlier rows first among equal values.
            order.sort_by(|&x, &y| ta.get2(y, j).total_cmp(&ta.get2(x, j)));
            order.truncate(keep);
            *slot = order.iter().map(|&r| ta.get2(r, j)).sum::<f64>() / keep as f64;
            selected.push(order.clone());
        }
        self.push_op(
            "kmax_avg_pool",
            Tensor::vector(out),
            Op::KMaxAvgPool { input: a, selected },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_op("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Single element of a vector as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 || index >= ta.len() {
            return Err(Error::Dimension(format!(
                "pick {index} out of range for {:?}",
                ta.shape()
            )));
        }
        let v = ta.data()[index];
        self.push_op("pick", Tensor::scalar(v), Op::Pick { input: a, index }, &[a])
    }

    /// `-(1/n) Σ_{t: mask[t]} logp[t, targets[t]]` over an `[m×V]` matrix of
    /// log-probabilities; `n` is the number of unmasked rows.
    pub fn masked_nll(&mut self, logp: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logp);
        if tl.rank() != 2 || tl.rows() != targets.len() || targets.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "masked_nll: log-probs {:?}, {} targets, {} mask entries",
                tl.shape(),
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= tl.cols()) {
            return Err(Error::Dimension(format!(
                "target id {bad} outside vocabulary of {}",
                tl.cols()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Instance("every target position is masked".into()));
        }
        let total: f64 = (0..targets.len())
            .filter(|&t| mask[t])
            .map(|t| tl.get2(t, targets[t]))
            .sum();
        let out = Tensor::scalar(-total / count as f64);
        let op = Op::MaskedNll {
            input: logp,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        self.push_op("masked_nll", out, op, &[logp])
    }

    /// `Σ_i ‖x_i‖²` over a set of tensors.
    pub fn sum_squares(&mut self, inputs: &[Var]) -> Result<Var> {
        let s = inputs.iter().map(|&v| self.value(v).sum_squares()).sum();
        self.push_op(
            "sum_squares",
            Tensor::scalar(s),
            Op::SumSquares(inputs.to_vec()),
            inputs,
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Propagate `d seed / d node` to every node that requires a gradient.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let st = self.value(seed);
        if st.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar seed, got shape {:?}",
                st.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(seed.0 + 1, || None);
        grads[seed.0] = Some(vec![1.0]);

        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.apply_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.param.map(|p| (i, p, n.value.get().len())))
                .collect(),
        })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn apply_backward(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[idx].value.get();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    accumulate(&mut grads[a.0], m * n, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += dot(&g[i * p..(i + 1) * p], &tb.data()[j * p..(j + 1) * p]);
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    accumulate(&mut grads[b.0], n * p, |gb| {
                        for i in 0..m {
                            for j in 0..n {
                                let aij = ta.data()[i * n + j];
                                axpy(aij, &g[i * p..(i + 1) * p], &mut gb[j * p..(j + 1) * p]);
                            }
                        }
                    });
                }
            }
            Op::MatVec(w, x) => {
                let (tw, tx) = (self.value(*w), self.value(*x));
                let (m, n) = (tw.shape()[0], tw.shape()[1]);
                if self.rg(*w) {
                    accumulate(&mut grads[w.0], m * n, |gw| {
                        for (i, &gi) in g.iter().enumerate() {
                            if gi != 0.0 {
                                axpy(gi, tx.data(), &mut gw[i * n..(i + 1) * n]);
                            }
                        }
                    });
                }
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], n, |gx| {
                        for (i, &gi) in g.iter().enumerate() {
                            if gi != 0.0 {
                                axpy(gi, &tw.data()[i * n..(i + 1) * n], gx);
                            }
                        }
                    });
                }
            }
            Op::VecMat(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, p) = (tw.shape()[0], tw.shape()[1]);
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], n, |gx| {
                        for (i, gxi) in gx.iter_mut().enumerate() {
                            *gxi += dot(&tw.data()[i * p..(i + 1) * p], g);
                        }
                    });
                }
                if self.rg(*w) {
                    accumulate(&mut grads[w.0], n * p, |gw| {
                        for (i, &xi) in tx.data().iter().enumerate() {
                            if xi != 0.0 {
                                axpy(xi, g, &mut gw[i * p..(i + 1) * p]);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], g.len(), |ga| axpy(1.0, g, ga));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| axpy(1.0, g, ga));
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| axpy(-1.0, g, gb));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * tb.data()[i];
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * ta.data()[i];
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[a.0], g.len(), |ga| axpy(*s, g, ga));
            }
            Op::MulConst(a, factor) => {
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * factor[i];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.data();
                let gy = dot(g, y);
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += y[i] * (g[i] - gy);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                let total: f64 = g.iter().sum();
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] - y[i].exp() * total;
                    }
                });
            }
            Op::Concat { a, b, axis } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (la, lb) = (ta.len(), tb.len());
                if *axis == 0 {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], la, |ga| axpy(1.0, &g[..la], ga));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], lb, |gb| axpy(1.0, &g[la..], gb));
                    }
                } else {
                    let (ca, cb) = (ta.cols(), tb.cols());
                    let w = ca + cb;
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], la, |ga| {
                            for r in 0..ta.rows() {
                                axpy(1.0, &g[r * w..r * w + ca], &mut ga[r * ca..(r + 1) * ca]);
                            }
                        });
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], lb, |gb| {
                            for r in 0..tb.rows() {
                                axpy(1.0, &g[r * w + ca..(r + 1) * w], &mut gb[r * cb..(r + 1) * cb]);
                            }
                        });
                    }
                }
            }
            Op::Slice { input, start } => {
                let n = self.value(*input).len();
                accumulate(&mut grads[input.0], n, |ga| {
                    axpy(1.0, g, &mut ga[*start..*start + g.len()]);
                });
            }
            Op::Row { input, row } => {
                let t = self.value(*input);
                let c = t.cols();
                accumulate(&mut grads[input.0], t.len(), |ga| {
                    axpy(1.0, g, &mut ga[row * c..(row + 1) * c]);
                });
            }
            Op::StackRows(rows) => {
                let n = out.cols();
                for (r, v) in rows.iter().enumerate() {
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], n, |gv| axpy(1.0, &g[r * n..(r + 1) * n], gv));
                    }
                }
            }
            Op::KMaxAvgPool { input, selected } => {
                let t = self.value(*input);
                let h = t.cols();
                accumulate(&mut grads[input.0], t.len(), |ga| {
                    for (j, rows) in selected.iter().enumerate() {
                        let share = g[j] / rows.len() as f64;
                        for &r in rows {
                            ga[r * h + j] += share;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], n, |ga| ga.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Pick { input, index } => {
                let n = self.value(*input).len();
                accumulate(&mut grads[input.0], n, |ga| ga[*index] += g[0]);
            }
            Op::MaskedNll {
                input,
                targets,
                mask,
                count,
            } => {
                let t = self.value(*input);
                let v = t.cols();
                let share = -g[0] / *count as f64;
                accumulate(&mut grads[input.0], t.len(), |ga| {
                    for (row, (&target, &m)) in targets.iter().zip(mask).enumerate() {
                        if m {
                            ga[row * v + target] += share;
                        }
                    }
                });
            }
            Op::SumSquares(inputs) => {
                for v in inputs {
                    if self.rg(*v) {
                        let x = self.value(*v).data();
                        accumulate(&mut grads[v.0], x.len(), |gv| axpy(2.0 * g[0], x, gv));
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize, usize)>,
}

impl Gradients {
    /// Gradient for a node, or `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients keyed by parameter id, summed across every leaf that
    /// referenced the same parameter. Parameters bound on the tape but not
    /// reached from the seed get an all-zero entry.
    pub fn by_param(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &(node, pid, len) in &self.params {
            let slot = out.entry(pid).or_insert_with(|| vec![0.0; len]);
            if let Some(g) = self.grads.get(node).and_then(|g| g.as_deref()) {
                axpy(1.0, g, slot);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik != 0.0 {
                axpy(aik, &b[k * p..(k + 1) * p], row);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<'_>, v: &[f64]) -> Var {
        tape.leaf(Tensor::vector(v.to_vec()), true)
    }

    #[test]
    fn product_rule_at_three_five() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.leaf(Tensor::scalar(5.0), true);
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[5.0]);
        assert_eq!(g.wrt(y).unwrap(), &[3.0]);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.tanh(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0]);
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]), false);
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(t).data(), &[0.0]);
    }

    #[test]
    fn multiply_by_zeros_kills_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[0.3, -1.2, 4.0]);
        let z = tape.leaf(Tensor::zeros(&[3]), false);
        let y = tape.mul(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let i3 = tape.leaf(Tensor::identity(3), false);
        let b = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bv = tape.leaf(b.clone(), false);
        let p = tape.matmul(i3, bv).unwrap();
        assert_eq!(tape.value(p), &b);

        let a = tape.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap(), false);
        let c = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap(), false);
        let p = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(p).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let u = vec_leaf(&mut tape, &[0.7, 0.7, 0.7]);
        let s = tape.softmax(u).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = vec_leaf(&mut tape, &[0.0, 2f64.ln()]);
        let s = tape.softmax(x).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-15);

        let e = tape.leaf(Tensor::vector(vec![]), false);
        assert!(matches!(tape.softmax(e), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_extreme_inputs_stay_finite() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = vec_leaf(&mut tape, &[50.0, -50.0, 49.0]);
        let s = tape.softmax(x).unwrap();
        assert!((tape.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = tape.log_softmax(x).unwrap();
        assert!(tape.value(l).is_finite());
        let sg = tape.sigmoid(x).unwrap();
        assert!(tape.value(sg).is_finite());
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0]);
        let b = vec_leaf(&mut tape, &[2.0]);
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[1.0]);
        assert_eq!(g.wrt(b).unwrap(), &[1.0]);

        let m1 = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let m2 = tape.leaf(Tensor::zeros(&[3, 3]), false);
        assert!(tape.concat(m1, m2, 1).is_err());
        let v = tape.concat(m1, m2, 0).unwrap();
        assert_eq!(tape.value(v).shape(), &[5, 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 2.0]);
        let b = tape.tanh(a).unwrap();
        assert!(matches!(tape.backward(b), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_is_reported_when_checking() {
        let mut tape = Tape::new().with_finite_checks(true);
        let a = vec_leaf(&mut tape, &[0.0]);
        assert!(matches!(tape.log(a), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn dropout_modes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let ones = tape.leaf(Tensor::filled(&[100_000], 1.0), false);
        let y = tape.dropout(ones, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn masked_softmax_zeroes_excluded() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let s = tape.masked_softmax(a, &[2]).unwrap();
        let d = tape.value(s).data();
        assert_eq!(d[2], 0.0);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-15);
        assert!(matches!(tape.masked_softmax(a, &[0, 1, 2]), Err(Error::Memory(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let mv = tape.constant(&m);
        let x = vec_leaf(&mut tape, &[0.5, -0.5]);
        let y = tape.matvec(mv, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(mv).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[4.0, 6.0]);
    }
}
