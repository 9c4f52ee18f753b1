//! Dynamic reverse-mode differentiation tape over dense 2-D `f64` arrays.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so insertion order is a topological order and the graph
//! is acyclic by construction; [`Tape::backward`] walks it once in reverse.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use super::kernels;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(Rc<str>),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    OneMinus(usize),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    SegmentSoftmax(usize, Rc<[usize]>, usize),
    SoftmaxRows(usize),
    MeanRows(usize),
    SumAll(usize),
    MeanAll(usize),
    Mse(usize, Rc<Array2<f64>>),
    BceWithLogits(usize, Rc<Array2<f64>>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

/// Numerically stable `-[y ln σ(x) + (1-y) ln(1-σ(x))]`.
pub fn bce_with_logits_scalar(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Borrow the forward value of `v`.
    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.value(v))
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Health check: every entry of `v` is finite.
    pub fn is_finite(&self, v: Var) -> bool {
        self.value(v).iter().all(|x| x.is_finite())
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant holding a copy of `v`'s value; gradient flow is severed.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// A differentiable leaf. When `name` is set, [`crate::tensor::ParamStore::accumulate`]
    /// routes its gradient back to the parameter of that name.
    pub fn leaf(&self, value: Array2<f64>, name: Option<Rc<str>>) -> Var {
        let op = match name {
            Some(n) => Op::Param(n),
            None => Op::Leaf,
        };
        self.push(value, op, true)
    }

    pub(crate) fn param_leaves(&self) -> Vec<(Rc<str>, Var)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), Var(i))),
                _ => None,
            })
            .collect()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            if x.ncols() != y.nrows() {
                return Err(Error::Dimension {
                    op: "matmul",
                    left: shape(&x),
                    right: shape(&y),
                });
            }
            kernels::matmul(&x, &y)
        };
        Ok(self.push(out, Op::MatMul(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = &*self.value(a) + &*self.value(b);
        Ok(self.push(out, Op::Add(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = &*self.value(a) - &*self.value(b);
        Ok(self.push(out, Op::Sub(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = &*self.value(a) * &*self.value(b);
        Ok(self.push(out, Op::Mul(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    /// `a[p×q] + row[1×q]`, the row broadcast down every row (bias add).
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = {
            let (x, r) = (self.value(a), self.value(row));
            if r.nrows() != 1 || r.ncols() != x.ncols() {
                return Err(Error::Dimension {
                    op: "add_row",
                    left: shape(&x),
                    right: shape(&r),
                });
            }
            &*x + &*r
        };
        Ok(self.push(out, Op::AddRow(a.0, row.0), self.rg(&[a.0, row.0])))
    }

    /// `a[p×q] + col[p×1]`, the column broadcast across every column.
    pub fn add_col(&self, a: Var, col: Var) -> Result<Var> {
        let out = {
            let (x, c) = (self.value(a), self.value(col));
            if c.ncols() != 1 || c.nrows() != x.nrows() {
                return Err(Error::Dimension {
                    op: "add_col",
                    left: shape(&x),
                    right: shape(&c),
                });
            }
            &*x + &*c
        };
        Ok(self.push(out, Op::AddCol(a.0, col.0), self.rg(&[a.0, col.0])))
    }

    /// `a[p×q] * col[p×1]`, scaling each row by its entry of `col`.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let out = {
            let (x, c) = (self.value(a), self.value(col));
            if c.ncols() != 1 || c.nrows() != x.nrows() {
                return Err(Error::Dimension {
                    op: "mul_col",
                    left: shape(&x),
                    right: shape(&c),
                });
            }
            kernels::mul_col(&x, &c)
        };
        Ok(self.push(out, Op::MulCol(a.0, col.0), self.rg(&[a.0, col.0])))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = &*self.value(a) * k;
        self.push(out, Op::Scale(a.0, k), self.rg(&[a.0]))
    }

    /// `a * s` where `s` is a differentiable `1×1` node.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let out = {
            let (x, k) = (self.value(a), self.value(s));
            if shape(&k) != (1, 1) {
                return Err(Error::Dimension {
                    op: "scale_by",
                    left: shape(&x),
                    right: shape(&k),
                });
            }
            &*x * k[[0, 0]]
        };
        Ok(self.push(out, Op::ScaleBy(a.0, s.0), self.rg(&[a.0, s.0])))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 - x);
        self.push(out, Op::OneMinus(a.0), self.rg(&[a.0]))
    }

    pub fn activation(&self, a: Var, kind: Activation) -> Var {
        match kind {
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Tanh => self.tanh(a),
            Activation::LeakyRelu(alpha) => self.leaky_relu(a, alpha),
        }
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a.0), self.rg(&[a.0]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a.0), self.rg(&[a.0]))
    }

    pub fn leaky_relu(&self, a: Var, alpha: f64) -> Var {
        let out = self.value(a).mapv(|x| leaky_relu(x, alpha));
        self.push(out, Op::LeakyRelu(a.0, alpha), self.rg(&[a.0]))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(a.0), self.rg(&[a.0]))
    }

    /// Row-major reshape to `rows×cols`.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if x.len() != rows * cols {
                return Err(Error::Dimension {
                    op: "reshape",
                    left: shape(&x),
                    right: (rows, cols),
                });
            }
            let flat: Vec<f64> = x.iter().copied().collect();
            Array2::from_shape_vec((rows, cols), flat).expect("length checked")
        };
        Ok(self.push(out, Op::Reshape(a.0), self.rg(&[a.0])))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, Axis(1))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, Axis(0))
    }

    fn concat(&self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero arrays"));
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let out = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Array2<f64>> = ids.iter().map(|&i| &nodes[i].value).collect();
            let s0 = shape(values[0]);
            if let Some(bad) = values.iter().map(|v| shape(v)).find(|s| {
                if axis == Axis(1) {
                    s.0 != s0.0
                } else {
                    s.1 != s0.1
                }
            }) {
                return Err(Error::Dimension {
                    op: "concat",
                    left: s0,
                    right: bad,
                });
            }
            if axis == Axis(1) {
                concat_cols_values(&values)
            } else {
                concat_rows_values(&values)
            }
        };
        let rg = self.rg(&ids);
        let op = if axis == Axis(1) {
            Op::ConcatCols(ids)
        } else {
            Op::ConcatRows(ids)
        };
        Ok(self.push(out, op, rg))
    }

    /// `out[k] = a[idx[k]]`.
    pub fn gather_rows(&self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if let Some(&bad) = idx.iter().find(|&&i| i >= x.nrows()) {
                return Err(Error::contract(format!(
                    "gather_rows index {bad} out of range for {} rows",
                    x.nrows()
                )));
            }
            gather_rows_values(&x, &idx)
        };
        Ok(self.push(out, Op::GatherRows(a.0, idx), self.rg(&[a.0])))
    }

    /// `out[idx[k]] += a[k]` into an `n`-row zero array.
    pub fn scatter_add_rows(&self, a: Var, idx: Rc<[usize]>, n: usize) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if idx.len() != x.nrows() {
                return Err(Error::contract(format!(
                    "scatter_add_rows: {} indices for {} rows",
                    idx.len(),
                    x.nrows()
                )));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::contract(format!(
                    "scatter_add_rows index {bad} out of range for {n} rows"
                )));
            }
            scatter_add_values(&x, &idx, n)
        };
        Ok(self.push(out, Op::ScatterAddRows(a.0, idx), self.rg(&[a.0])))
    }

    /// Softmax of a column `a[E×1]` within the segments given by `seg[e] < n`.
    ///
    /// Each segment's maximum is subtracted before exponentiating.
    pub fn segment_softmax(&self, a: Var, seg: Rc<[usize]>, n: usize) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if x.ncols() != 1 || seg.len() != x.nrows() {
                return Err(Error::contract(format!(
                    "segment_softmax expects a column with one segment id per row, got {:?} and {} ids",
                    shape(&x),
                    seg.len()
                )));
            }
            if let Some(&bad) = seg.iter().find(|&&i| i >= n) {
                return Err(Error::contract(format!(
                    "segment id {bad} out of range for {n} segments"
                )));
            }
            segment_softmax_values(&x.column(0).to_vec(), &seg, n)
        };
        Ok(self.push(out, Op::SegmentSoftmax(a.0, seg, n), self.rg(&[a.0])))
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a));
        self.push(out, Op::SoftmaxRows(a.0), self.rg(&[a.0]))
    }

    /// Column means, `[p×q] -> [1×q]`.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if x.nrows() == 0 {
                return Err(Error::contract("mean_rows of an empty array"));
            }
            x.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0))
        };
        Ok(self.push(out, Op::MeanRows(a.0), self.rg(&[a.0])))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a.0), self.rg(&[a.0]))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if x.is_empty() {
                return Err(Error::contract("mean_all of an empty array"));
            }
            Array2::from_elem((1, 1), x.sum() / x.len() as f64)
        };
        Ok(self.push(out, Op::MeanAll(a.0), self.rg(&[a.0])))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&self, pred: Var, target: Rc<Array2<f64>>) -> Result<Var> {
        let out = {
            let x = self.value(pred);
            if shape(&x) != shape(&target) {
                return Err(Error::Dimension {
                    op: "mse",
                    left: shape(&x),
                    right: shape(&target),
                });
            }
            if x.is_empty() {
                return Err(Error::contract("mse of empty arrays"));
            }
            let mut acc = 0.0;
            Zip::from(&*x).and(&*target).for_each(|&p, &t| {
                acc += (p - t) * (p - t);
            });
            Array2::from_elem((1, 1), acc / x.len() as f64)
        };
        Ok(self.push(out, Op::Mse(pred.0, target), self.rg(&[pred.0])))
    }

    /// Mean binary cross-entropy of `logits` against constant `labels` in [0, 1].
    pub fn bce_with_logits(&self, logits: Var, labels: Rc<Array2<f64>>) -> Result<Var> {
        let out = {
            let x = self.value(logits);
            if shape(&x) != shape(&labels) {
                return Err(Error::Dimension {
                    op: "bce_with_logits",
                    left: shape(&x),
                    right: shape(&labels),
                });
            }
            if x.is_empty() {
                return Err(Error::contract("bce_with_logits of an empty batch"));
            }
            let mut acc = 0.0;
            Zip::from(&*x)
                .and(&*labels)
                .for_each(|&l, &y| acc += bce_with_logits_scalar(l, y));
            Array2::from_elem((1, 1), acc / x.len() as f64)
        };
        Ok(self.push(out, Op::BceWithLogits(logits.0, labels), self.rg(&[logits.0])))
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Every node is visited once, in reverse insertion order. Gradients are
    /// freshly computed per call; accumulation across calls happens in
    /// [`crate::tensor::ParamStore::accumulate`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if shape(&nodes[loss.0].value) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                shape(&nodes[loss.0].value)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], nodes: &[Node], i: usize, g: Array2<f64>) {
            if !nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = kernels::matmul_nt(&g, val(*b));
                    let gb = kernels::matmul_tn(val(*a), &g);
                    acc(&mut grads, &nodes, *a, ga);
                    acc(&mut grads, &nodes, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, &nodes, *a, &g * val(*b));
                    acc(&mut grads, &nodes, *b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, &nodes, *r, gr);
                }
                Op::AddCol(a, c) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    let gc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, &nodes, *c, gc);
                }
                Op::MulCol(a, c) => {
                    acc(&mut grads, &nodes, *a, kernels::mul_col(&g, val(*c)));
                    let gc = kernels::row_dots(&g, val(*a));
                    acc(&mut grads, &nodes, *c, gc);
                }
                Op::Scale(a, k) => acc(&mut grads, &nodes, *a, &g * *k),
                Op::ScaleBy(a, s) => {
                    let k = val(*s)[[0, 0]];
                    let gs = (&g * val(*a)).sum();
                    acc(&mut grads, &nodes, *a, &g * k);
                    acc(&mut grads, &nodes, *s, Array2::from_elem((1, 1), gs));
                }
                Op::OneMinus(a) => acc(&mut grads, &nodes, *a, -&g),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LeakyRelu(a, alpha) => {
                    let ga = Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| if x >= 0.0 { g } else { g * alpha });
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, &nodes, *a, g.t().as_standard_layout().into_owned()),
                Op::Reshape(a) => {
                    let sa = shape(val(*a));
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, &nodes, *a, Array2::from_shape_vec(sa, flat).expect("same size"));
                }
                Op::ConcatCols(ids) => {
                    let mut start = 0;
                    for &j in ids {
                        let w = val(j).ncols();
                        acc(&mut grads, &nodes, j, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(ids) => {
                    let mut start = 0;
                    for &j in ids {
                        let h = val(j).nrows();
                        acc(&mut grads, &nodes, j, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let ga = scatter_add_values(&g, idx, val(*a).nrows());
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::ScatterAddRows(a, idx) => {
                    let ga = gather_rows_values(&g, idx);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SegmentSoftmax(a, seg, n) => {
                    let y = &node.value;
                    let mut dot = vec![0.0; *n];
                    for (e, &sg) in seg.iter().enumerate() {
                        dot[sg] += g[[e, 0]] * y[[e, 0]];
                    }
                    let mut ga = Array2::zeros((y.nrows(), 1));
                    for (e, &sg) in seg.iter().enumerate() {
                        ga[[e, 0]] = y[[e, 0]] * (g[[e, 0]] - dot[sg]);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::MeanRows(a) => {
                    let p = val(*a).nrows();
                    let ga = Array2::from_shape_fn((p, g.ncols()), |(_, c)| g[[0, c]] / p as f64);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SumAll(a) => {
                    let sa = shape(val(*a));
                    acc(&mut grads, &nodes, *a, Array2::from_elem(sa, g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let x = val(*a);
                    let v = g[[0, 0]] / x.len() as f64;
                    acc(&mut grads, &nodes, *a, Array2::from_elem(shape(x), v));
                }
                Op::Mse(a, target) => {
                    let x = val(*a);
                    let k = 2.0 * g[[0, 0]] / x.len() as f64;
                    let ga = Zip::from(x).and(&**target).map_collect(|&p, &t| k * (p - t));
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::BceWithLogits(a, labels) => {
                    let x = val(*a);
                    let k = g[[0, 0]] / x.len() as f64;
                    let ga = Zip::from(x)
                        .and(&**labels)
                        .map_collect(|&l, &y| k * (sigmoid(l) - y));
                    acc(&mut grads, &nodes, *a, ga);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn gather_rows_values(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let x = x.as_standard_layout();
    let c = x.ncols();
    let src = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&src[i * c..(i + 1) * c]);
    }
    Array2::from_shape_vec((idx.len(), c), out).expect("gathered shape")
}

fn scatter_add_values(x: &Array2<f64>, idx: &[usize], n: usize) -> Array2<f64> {
    let x = x.as_standard_layout();
    let c = x.ncols();
    let src = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * c];
    for (k, &i) in idx.iter().enumerate() {
        for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(&src[k * c..(k + 1) * c]) {
            *o += v;
        }
    }
    Array2::from_shape_vec((n, c), out).expect("scattered shape")
}

fn concat_rows_values(parts: &[&Array2<f64>]) -> Array2<f64> {
    let c = parts[0].ncols();
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Vec::with_capacity(rows * c);
    for p in parts {
        out.extend_from_slice(p.as_standard_layout().as_slice().expect("standard layout"));
    }
    Array2::from_shape_vec((rows, c), out).expect("stacked shape")
}

fn concat_cols_values(parts: &[&Array2<f64>]) -> Array2<f64> {
    let r = parts[0].nrows();
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let std: Vec<_> = parts.iter().map(|p| p.as_standard_layout()).collect();
    let slices: Vec<&[f64]> = std.iter().map(|p| p.as_slice().expect("standard layout")).collect();
    let mut out = Vec::with_capacity(r * cols);
    for i in 0..r {
        for (p, sl) in parts.iter().zip(&slices) {
            let w = p.ncols();
            out.extend_from_slice(&sl[i * w..(i + 1) * w]);
        }
    }
    Array2::from_shape_vec((r, cols), out).expect("joined shape")
}

fn segment_softmax_values(x: &[f64], seg: &[usize], n: usize) -> Array2<f64> {
    let mut max = vec![f64::NEG_INFINITY; n];
    for (&v, &s) in x.iter().zip(seg) {
        if v > max[s] {
            max[s] = v;
        }
    }
    let e: Vec<f64> = x.iter().zip(seg).map(|(&v, &s)| (v - max[s]).exp()).collect();
    let mut sum = vec![0.0; n];
    for (&v, &s) in e.iter().zip(seg) {
        sum[s] += v;
    }
    Array2::from_shape_fn((x.len(), 1), |(k, _)| e[k] / sum[seg[k]])
}

/// Row-wise softmax on a plain array.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_identity_and_product() {
        let t = Tape::new();
        let i2 = t.constant(Array2::eye(2));
        let b = t.constant(array![[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(*t.value(t.matmul(i2, b).unwrap()), array![[5.0, 6.0], [7.0, 8.0]]);
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(*t.value(t.matmul(a, b).unwrap()), array![[19.0, 22.0], [43.0, 50.0]]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        match t.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn activations() {
        let t = Tape::new();
        let x = t.constant(array![[3.0, -1.0, 0.0]]);
        let y = t.leaky_relu(x, 0.2);
        assert_eq!(*t.value(y), array![[3.0, -0.2, 0.0]]);
        assert_eq!(t.value(t.sigmoid(x))[[0, 2]], 0.5);
        assert_eq!(t.value(t.tanh(x))[[0, 2]], 0.0);
    }

    #[test]
    fn non_finite_input_is_detectable() {
        let t = Tape::new();
        let x = t.constant(array![[f64::NAN, 1.0]]);
        let y = t.tanh(x);
        assert!(!t.is_finite(y));
        assert!(t.is_finite(t.constant(array![[1.0]])));
    }

    #[test]
    fn softmax_rows_cases() {
        let x = array![[1.0, 1.0, 1.0], [0.0, 2f64.ln(), f64::NEG_INFINITY]];
        let y = softmax_rows(&x);
        for v in y.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y[[1, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y[[1, 1]] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(y[[1, 2]], 0.0);
    }

    #[test]
    fn losses() {
        let t = Tape::new();
        let p = t.constant(array![[1.0, 2.0]]);
        let l = t.mse(p, Rc::new(array![[2.0, 4.0]])).unwrap();
        assert_eq!(t.scalar(l), 2.5);
        let z = t.mse(p, Rc::new(array![[1.0, 2.0]])).unwrap();
        assert_eq!(t.scalar(z), 0.0);
        let logit = t.constant(array![[0.0]]);
        let b = t.bce_with_logits(logit, Rc::new(array![[1.0]])).unwrap();
        assert!((t.scalar(b) - 2f64.ln()).abs() < 1e-15);
        assert!(t.mse(p, Rc::new(array![[1.0]])).is_err());
    }

    #[test]
    fn bce_is_stable_for_huge_logits() {
        assert_eq!(bce_with_logits_scalar(800.0, 1.0), 0.0);
        assert!((bce_with_logits_scalar(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn backward_power_rule_and_accumulation() {
        let t = Tape::new();
        let x = t.leaf(array![[3.0]], None);
        let sq = t.mul(x, x).unwrap();
        let g = t.backward(sq).unwrap();
        assert_eq!(g.wrt(x).unwrap()[[0, 0]], 6.0);
        assert_eq!(g.wrt(sq).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = t.leaf(Array2::zeros((2, 2)), None);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tape::new();
        let x = t.leaf(array![[2.0]], None);
        let c = t.detach(x);
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap()[[0, 0]], 2.0);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn scatter_and_gather_are_adjoint() {
        let t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]], None);
        let idx: Rc<[usize]> = Rc::from(vec![1, 1, 0]);
        let g = t.gather_rows(a, idx.clone()).unwrap();
        assert_eq!(*t.value(g), array![[3.0, 4.0], [3.0, 4.0], [1.0, 2.0]]);
        let s = t.scatter_add_rows(g, idx, 2).unwrap();
        assert_eq!(*t.value(s), array![[1.0, 2.0], [6.0, 8.0]]);
        let l = t.sum_all(s);
        let grads = t.backward(l).unwrap();
        assert_eq!(*grads.wrt(a).unwrap(), array![[1.0, 1.0], [2.0, 2.0]]);
    }

    #[test]
    fn segment_softmax_normalizes_each_segment() {
        let t = Tape::new();
        let x = t.constant(array![[0.0], [2f64.ln()], [5.0], [100.0]]);
        let seg: Rc<[usize]> = Rc::from(vec![0, 0, 2, 2]);
        let y = t.segment_softmax(x, seg, 3).unwrap();
        let v = t.value(y);
        assert!((v[[0, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[[1, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[[2, 0]] + v[[3, 0]] - 1.0).abs() < 1e-15);
    }
}
