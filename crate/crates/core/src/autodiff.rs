//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation performed on [`Var`] handles during a
//! forward pass. [`Tape::backward`] replays the records in reverse and adds
//! gradients into the leaves that were created with `requires_grad`.
//! Gradients accumulate across repeated `backward` calls until
//! [`Tape::zero_grad`].
//!
//! A fresh tape is built for every training step; parameters are bound as
//! leaves at the start of the step.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, VawiError};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, softmax_in_place, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    ScaleRows(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    Tanh(usize),
    Gelu(usize),
    Ln(usize),
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        input: usize,
        start: usize,
    },
    SliceCols {
        input: usize,
        start: usize,
    },
    MeanRows(usize),
    Sum(usize),
    Pick {
        input: usize,
        index: usize,
    },
    StraightThrough(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. Not `Sync`; build one per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| VawiError::Contract("concat_rows of zero tensors".into()))?;
        let cols = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            if v.rank() != 2 || v.cols() != cols {
                return Err(VawiError::dim("concat_rows", first.value().shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| VawiError::Contract("concat_cols of zero tensors".into()))?;
        let rows = first.value().rows();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            if v.rank() != 2 || v.rows() != rows {
                return Err(VawiError::dim("concat_cols", first.value().shape(), v.shape()));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(ids), rg))
    }

    /// Value `hard`, gradient routed to `soft` as if the output were `soft`.
    pub fn straight_through<'t>(&'t self, hard: Tensor, soft: Var<'t>) -> Result<Var<'t>> {
        if hard.shape() != soft.value().shape() {
            return Err(VawiError::dim("straight_through", hard.shape(), soft.value().shape()));
        }
        let rg = self.needs(&[soft.id]);
        Ok(self.push(hard, Op::StraightThrough(soft.id), rg))
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Back-propagates from a scalar output into every tracked leaf.
    pub fn backward(&self, output: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(VawiError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[output.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[target].requires_grad {
                    return;
                }
                let buf = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
                f(buf);
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    let mut leaf = self.leaf_grads.borrow_mut();
                    if leaf.len() <= id {
                        leaf.resize(id + 1, None);
                    }
                    match &mut leaf[id] {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                        slot => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    acc(*a, &mut |buf| matmul_nt_into(&g, bv.data(), buf, m, n, k));
                    acc(*b, &mut |buf| matmul_tn_into(av.data(), &g, buf, m, k, n));
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    acc(*a, &mut |buf| matmul_into(&g, bv.data(), buf, m, n, k));
                    acc(*b, &mut |buf| matmul_tn_into(&g, av.data(), buf, m, n, k));
                }
                Op::Transpose(a) => {
                    let (m, n) = (out.rows(), out.cols());
                    acc(*a, &mut |buf| {
                        for i in 0..m {
                            for j in 0..n {
                                buf[j * m + i] += g[i * n + j];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| add_into(buf, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| buf.iter_mut().zip(&g).for_each(|(x, v)| *x -= v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, &mut |buf| {
                        for ((x, gv), y) in buf.iter_mut().zip(&g).zip(bv.data()) {
                            *x += gv * y;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for ((x, gv), y) in buf.iter_mut().zip(&g).zip(av.data()) {
                            *x += gv * y;
                        }
                    });
                }
                Op::AddRow(a, b) => {
                    let n = out.cols();
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| {
                        for row in g.chunks(n) {
                            add_into(buf, row);
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |buf| {
                    buf.iter_mut().zip(&g).for_each(|(x, v)| *x += c * v)
                }),
                Op::AddConst(a) => acc(*a, &mut |buf| add_into(buf, &g)),
                Op::ScaleRows(a, w) => {
                    let (av, wv) = (&nodes[*a].value, &nodes[*w].value);
                    let n = av.cols();
                    acc(*a, &mut |buf| {
                        for (r, (brow, grow)) in buf.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                            let s = wv.data()[r];
                            brow.iter_mut().zip(grow).for_each(|(x, v)| *x += s * v);
                        }
                    });
                    acc(*w, &mut |buf| {
                        for (r, (arow, grow)) in av.data().chunks(n).zip(g.chunks(n)).enumerate() {
                            buf[r] += arow.iter().zip(grow).map(|(x, v)| x * v).sum::<f64>();
                        }
                    });
                }
                Op::Softmax(a) => {
                    let n = out.cols();
                    acc(*a, &mut |buf| {
                        for ((brow, yrow), grow) in buf.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                            let dot: f64 = yrow.iter().zip(grow).map(|(y, v)| y * v).sum();
                            for ((x, y), v) in brow.iter_mut().zip(yrow).zip(grow) {
                                *x += y * (v - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let n = out.cols();
                    acc(*a, &mut |buf| {
                        for ((brow, yrow), grow) in buf.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                            let total: f64 = grow.iter().sum();
                            for ((x, y), v) in brow.iter_mut().zip(yrow).zip(grow) {
                                *x += v - y.exp() * total;
                            }
                        }
                    });
                }
                Op::Tanh(a) => acc(*a, &mut |buf| {
                    for ((x, y), v) in buf.iter_mut().zip(out.data()).zip(&g) {
                        *x += v * (1.0 - y * y);
                    }
                }),
                Op::Gelu(a) => {
                    let av = &nodes[*a].value;
                    acc(*a, &mut |buf| {
                        for ((x, &u), v) in buf.iter_mut().zip(av.data()).zip(&g) {
                            *x += v * gelu_grad(u);
                        }
                    });
                }
                Op::Ln(a) => {
                    let av = &nodes[*a].value;
                    acc(*a, &mut |buf| {
                        for ((x, u), v) in buf.iter_mut().zip(av.data()).zip(&g) {
                            *x += v / u;
                        }
                    });
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = out.cols();
                    let gam = &nodes[*gamma].value;
                    acc(*gamma, &mut |buf| {
                        for (hrow, grow) in xhat.chunks(n).zip(g.chunks(n)) {
                            for ((x, h), v) in buf.iter_mut().zip(hrow).zip(grow) {
                                *x += h * v;
                            }
                        }
                    });
                    acc(*beta, &mut |buf| {
                        for grow in g.chunks(n) {
                            add_into(buf, grow);
                        }
                    });
                    acc(*input, &mut |buf| {
                        let nf = n as f64;
                        for (r, ((brow, hrow), grow)) in
                            buf.chunks_mut(n).zip(xhat.chunks(n)).zip(g.chunks(n)).enumerate()
                        {
                            let dh: Vec<f64> = grow.iter().zip(gam.data()).map(|(v, s)| v * s).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(d, h)| d * h).sum();
                            let scale = inv_std[r] / nf;
                            for ((x, d), h) in brow.iter_mut().zip(&dh).zip(hrow) {
                                *x += scale * (nf * d - sum_dh - h * sum_dh_h);
                            }
                        }
                    });
                }
                Op::GatherRows { table, ids } => {
                    let n = out.cols();
                    acc(*table, &mut |buf| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut buf[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let mut col = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        acc(p, &mut |buf| {
                            for (brow, grow) in buf.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(brow, &grow[col..col + w]);
                            }
                        });
                        col += w;
                    }
                }
                Op::SliceRows { input, start } => {
                    let n = out.cols();
                    acc(*input, &mut |buf| add_into(&mut buf[start * n..start * n + g.len()], &g));
                }
                Op::SliceCols { input, start } => {
                    let w = out.cols();
                    let n = nodes[*input].value.cols();
                    acc(*input, &mut |buf| {
                        for (brow, grow) in buf.chunks_mut(n).zip(g.chunks(w)) {
                            add_into(&mut brow[*start..start + w], grow);
                        }
                    });
                }
                Op::MeanRows(a) => {
                    let m = nodes[*a].value.rows() as f64;
                    let n = out.cols();
                    acc(*a, &mut |buf| {
                        for brow in buf.chunks_mut(n) {
                            brow.iter_mut().zip(&g).for_each(|(x, v)| *x += v / m);
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0])),
                Op::Pick { input, index } => acc(*input, &mut |buf| buf[*index] += g[0]),
                Op::StraightThrough(soft) => acc(*soft, &mut |buf| add_into(buf, &g)),
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` if it never received one.
    pub fn grad(&self) -> Option<Tensor> {
        let grads = self.tape.leaf_grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        let shape = self.shape();
        Tensor::new(shape, g.clone()).ok()
    }

    /// Gradient of a leaf, zeros if it received none.
    pub fn grad_or_zeros(&self) -> Tensor {
        self.grad().unwrap_or_else(|| Tensor::zeros(&self.shape()))
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
            return Err(VawiError::dim("matmul_t", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let mut out = vec![0.0; m * n];
        matmul_nt_into(a.data(), b.data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(other, v, Op::MatMulNT(self.id, other.id)))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_with(&other.value(), "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_with(&other.value(), "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_with(&other.value(), "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        if a.rank() != 2 || b.len() != a.cols() {
            return Err(VawiError::dim("add_row", a.shape(), b.shape()));
        }
        let n = a.cols();
        let mut data = a.data().to_vec();
        for r in data.chunks_mut(n) {
            add_into(r, b.data());
        }
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddConst(self.id))
    }

    /// Multiplies row `i` by `weights[i]`; `weights` has `rows` elements.
    pub fn scale_rows(&self, weights: &Var<'t>) -> Result<Var<'t>> {
        let (a, w) = (self.value(), weights.value());
        if a.rank() != 2 || w.len() != a.rows() {
            return Err(VawiError::dim("scale_rows", a.shape(), w.shape()));
        }
        let n = a.cols();
        let mut data = a.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let s = w.data()[r];
            row.iter_mut().for_each(|x| *x *= s);
        }
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(weights, v, Op::ScaleRows(self.id, weights.id)))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.value().softmax_rows()?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Row softmax where entry `(i, j)` with `j > i` is masked to exactly 0.
    pub fn causal_softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(VawiError::dim("causal_softmax_rows", a.shape(), &[0, 0]));
        }
        let n = a.cols();
        let mut data = vec![0.0; a.len()];
        for (i, (dst, src)) in data.chunks_mut(n).zip(a.data().chunks(n)).enumerate() {
            let visible = (i + 1).min(n);
            dst[..visible].copy_from_slice(&src[..visible]);
            softmax_in_place(&mut dst[..visible]);
        }
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(VawiError::dim("log_softmax_rows", a.shape(), &[0, 0]));
        }
        let n = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(v, Op::LogSoftmax(self.id)))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    /// Per-row layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>) -> Result<Var<'t>> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let n = x.cols();
        if x.rank() != 2 || gv.len() != n || bv.len() != n {
            return Err(VawiError::dim("layer_norm", x.shape(), gv.shape()));
        }
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Embedding lookup: row `ids[r]` of this table becomes output row `r`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        let n = table.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= table.rows() {
                return Err(VawiError::Contract(format!(
                    "row index {id} out of range for table with {} rows",
                    table.rows()
                )));
            }
            data.extend_from_slice(table.row(id));
        }
        let v = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.unary(
            v,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value().slice_rows(start, end)?;
        Ok(self.unary(v, Op::SliceRows { input: self.id, start }))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || start > end || end > a.cols() {
            return Err(VawiError::dim("slice_cols", a.shape(), &[start, end]));
        }
        let n = a.cols();
        let mut data = Vec::with_capacity(a.rows() * (end - start));
        for row in a.data().chunks(n) {
            data.extend_from_slice(&row[start..end]);
        }
        let v = Tensor::new(vec![a.rows(), end - start], data)?;
        Ok(self.unary(v, Op::SliceCols { input: self.id, start }))
    }

    /// Column means, `m × n → 1 × n`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || a.rows() == 0 {
            return Err(VawiError::dim("mean_rows", a.shape(), &[1, a.cols()]));
        }
        let n = a.cols();
        let mut data = vec![0.0; n];
        for row in a.data().chunks(n) {
            add_into(&mut data, row);
        }
        let m = a.rows() as f64;
        data.iter_mut().for_each(|x| *x /= m);
        Ok(self.unary(Tensor::row_vector(data), Op::MeanRows(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Scalar element at flat row-major `index`.
    pub fn pick(&self, index: usize) -> Result<Var<'t>> {
        let a = self.value();
        if index >= a.len() {
            return Err(VawiError::Contract(format!(
                "pick index {index} out of range for {:?}",
                a.shape()
            )));
        }
        let v = Tensor::scalar(a.data()[index]);
        Ok(self.unary(v, Op::Pick { input: self.id, index }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = x.mul(&x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(vec![0.3, -1.2, 2.0, 0.1]), true);
        let y = x.softmax_rows().unwrap().sum();
        tape.backward(y).unwrap();
        for g in x.grad().unwrap().data() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(VawiError::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = x.mul(&x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 8.0);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn untracked_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = x.mul(&c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 5.0);
        assert!(c.grad().is_none());
        assert_eq!(c.grad_or_zeros().item(), 0.0);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 3], (0..9).map(f64::from).collect()).unwrap());
        let y = x.causal_softmax_rows().unwrap().value();
        assert_eq!(y.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(y.get(1, 2), 0.0);
        for r in 0..3 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let tape = Tape::new();
        let soft = tape.leaf(Tensor::row_vector(vec![0.2, 0.7]), true);
        let st = tape.straight_through(Tensor::row_vector(vec![0.0, 1.0]), soft).unwrap();
        assert_eq!(st.value().data(), &[0.0, 1.0]);
        let w = tape.constant(Tensor::row_vector(vec![3.0, -2.0]));
        tape.backward(st.mul(&w).unwrap().sum()).unwrap();
        assert_eq!(soft.grad().unwrap().data(), &[3.0, -2.0]);
    }
}
