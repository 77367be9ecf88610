//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every forward operation appends a node holding its output value and the
//! ids of its inputs. Because ids are handed out in creation order the node
//! list is already topologically sorted, and `backward` walks it in reverse.
//! A tape is rebuilt for every forward pass and can be differentiated once.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::tensor::{numel, Tensor};
use crate::error::{contract_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Sigmoid,
    Softplus,
    Tanh,
    Abs,
    Sign,
    Relu,
    Square,
    Recip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
    },
    Unary {
        kind: Unary,
        a: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Offset {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    SliceCols {
        a: usize,
        cols: usize,
        start: usize,
    },
    ConcatCols {
        parts: Vec<(usize, usize)>,
    },
    Gather {
        a: usize,
        index: Rc<[usize]>,
    },
    Mask {
        a: usize,
        keep: Vec<bool>,
    },
    AddRow {
        a: usize,
        bias: usize,
    },
    /// `act` holds the activated gates `[i | f | g | o]`.
    LstmCell {
        gates: usize,
        c_prev: usize,
        act: Vec<f64>,
    },
    LstmHidden {
        cell: usize,
        tanh_c: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &node.shape)
            .field("op", &node.op)
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the vars they belong to.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Logical `rows x cols` view of a row-major buffer, optionally transposed.
#[derive(Clone, Copy)]
struct MatView<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    trans: bool,
}

impl<'a> MatView<'a> {
    /// `stored` is the row-major shape of `data`.
    fn new(data: &'a [f64], stored: (usize, usize), trans: bool) -> Self {
        let (rows, cols) = if trans { (stored.1, stored.0) } else { stored };
        Self {
            data,
            rows,
            cols,
            trans,
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            trans: !self.trans,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
fn gemm(a: MatView<'_>, b: MatView<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), a.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: buffer sizes match the logical dimensions and strides checked above.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// Splits a shape into (rows, last-dim) for column-wise ops.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, rest)) => (numel(rest), c),
        None => (1, 1),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records a copy of `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn variable(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::param(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(&Tensor::scalar(value))
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Var<'_> {
        self.leaf(&Tensor::zeros(shape))
    }

    /// Reverse sweep from a scalar `loss`. A tape can only be swept once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(contract_err!("loss was recorded on a different tape"));
        }
        if self.consumed.get() {
            return Err(contract_err!(
                "backward already ran on this tape; record a new forward pass"
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            ));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (ar, ac) = as_matrix(&nodes[a].shape).unwrap();
            let (br, bc) = as_matrix(&nodes[b].shape).unwrap();
            let av = MatView::new(&nodes[a].value, (ar, ac), ta);
            let bv = MatView::new(&nodes[b].value, (br, bc), tb);
            let gv = MatView::new(g, (av.rows, bv.cols), false);
            if wants(a) {
                accumulate(&mut grads[a], ar * ac, |buf| {
                    if ta {
                        gemm(bv, gv.t(), buf, 1.0);
                    } else {
                        gemm(gv, bv.t(), buf, 1.0);
                    }
                });
            }
            if wants(b) {
                accumulate(&mut grads[b], br * bc, |buf| {
                    if tb {
                        gemm(gv.t(), av, buf, 1.0);
                    } else {
                        gemm(av.t(), gv, buf, 1.0);
                    }
                });
            }
        }
        &Op::Binary { kind, a, b } => {
            let (x, y) = (&nodes[a].value, &nodes[b].value);
            let n = g.len();
            let xs = x.len() == 1 && n != 1;
            let ys = y.len() == 1 && n != 1;
            let xi = |i: usize| if xs { x[0] } else { x[i] };
            let yi = |i: usize| if ys { y[0] } else { y[i] };
            let scatter = |slot: &mut Option<Vec<f64>>, scalar: bool, f: &dyn Fn(usize) -> f64| {
                if scalar {
                    let s: f64 = (0..n).map(f).sum();
                    accumulate(slot, 1, |buf| buf[0] += s);
                } else {
                    accumulate(slot, n, |buf| buf.iter_mut().enumerate().for_each(|(i, v)| *v += f(i)));
                }
            };
            if wants(a) {
                match kind {
                    Binary::Add | Binary::Sub => scatter(&mut grads[a], xs, &|i| g[i]),
                    Binary::Mul => scatter(&mut grads[a], xs, &|i| g[i] * yi(i)),
                }
            }
            if wants(b) {
                match kind {
                    Binary::Add => scatter(&mut grads[b], ys, &|i| g[i]),
                    Binary::Sub => scatter(&mut grads[b], ys, &|i| -g[i]),
                    Binary::Mul => scatter(&mut grads[b], ys, &|i| g[i] * xi(i)),
                }
            }
        }
        &Op::Unary { kind, a } => {
            if !wants(a) {
                return;
            }
            let x = &nodes[a].value;
            let y = &node.value;
            accumulate(&mut grads[a], x.len(), |buf| {
                for i in 0..buf.len() {
                    let d = match kind {
                        Unary::Neg => -1.0,
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Softplus => sigmoid(x[i]),
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Abs => sign(x[i]),
                        Unary::Sign => 0.0,
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * x[i],
                        Unary::Recip => -y[i] * y[i],
                    };
                    buf[i] += g[i] * d;
                }
            });
        }
        &Op::Scale { a, factor } => {
            if wants(a) {
                accumulate(&mut grads[a], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, v)| *b += factor * v)
                });
            }
        }
        &Op::Offset { a } | &Op::Reshape { a } => {
            if wants(a) {
                accumulate(&mut grads[a], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, v)| *b += v)
                });
            }
        }
        &Op::Sum { a } => {
            if wants(a) {
                let len = nodes[a].value.len();
                accumulate(&mut grads[a], len, |buf| buf.iter_mut().for_each(|b| *b += g[0]));
            }
        }
        &Op::SliceCols { a, cols, start } => {
            if wants(a) {
                let len = node.shape.last().copied().unwrap_or(1);
                let rows = g.len() / len;
                accumulate(&mut grads[a], rows * cols, |buf| {
                    for r in 0..rows {
                        let dst = &mut buf[r * cols + start..r * cols + start + len];
                        dst.iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
        }
        Op::ConcatCols { parts } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for &(p, w) in parts {
                if wants(p) {
                    accumulate(&mut grads[p], rows * w, |buf| {
                        for r in 0..rows {
                            buf[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                                .for_each(|(d, v)| *d += v);
                        }
                    });
                }
                offset += w;
            }
        }
        Op::Gather { a, index } => {
            if wants(*a) {
                let len = nodes[*a].value.len();
                accumulate(&mut grads[*a], len, |buf| {
                    index.iter().zip(g).for_each(|(&src, v)| buf[src] += v)
                });
            }
        }
        Op::Mask { a, keep } => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.len(), |buf| {
                    for i in 0..buf.len() {
                        if keep[i] {
                            buf[i] += g[i];
                        }
                    }
                });
            }
        }
        &Op::AddRow { a, bias } => {
            if wants(a) {
                accumulate(&mut grads[a], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, v)| *b += v)
                });
            }
            if wants(bias) {
                let cols = nodes[bias].value.len();
                accumulate(&mut grads[bias], cols, |buf| {
                    for row in g.chunks(cols) {
                        buf.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                    }
                });
            }
        }
        Op::LstmCell { gates, c_prev, act } => {
            let (gates, c_prev) = (*gates, *c_prev);
            let cp = &nodes[c_prev].value;
            let h = node.shape.last().copied().unwrap_or(1);
            let rows = g.len() / h;
            if wants(gates) {
                accumulate(&mut grads[gates], act.len(), |buf| {
                    for r in 0..rows {
                        let a = &act[r * 4 * h..(r + 1) * 4 * h];
                        let out = &mut buf[r * 4 * h..(r + 1) * 4 * h];
                        for j in 0..h {
                            let dc = g[r * h + j];
                            let (i_g, f_g, g_g) = (a[j], a[h + j], a[2 * h + j]);
                            out[j] += dc * g_g * i_g * (1.0 - i_g);
                            out[h + j] += dc * cp[r * h + j] * f_g * (1.0 - f_g);
                            out[2 * h + j] += dc * i_g * (1.0 - g_g * g_g);
                        }
                    }
                });
            }
            if wants(c_prev) {
                accumulate(&mut grads[c_prev], cp.len(), |buf| {
                    for r in 0..rows {
                        for j in 0..h {
                            buf[r * h + j] += g[r * h + j] * act[r * 4 * h + h + j];
                        }
                    }
                });
            }
        }
        Op::LstmHidden { cell, tanh_c } => {
            let cell = *cell;
            let Op::LstmCell { gates, ref act, .. } = nodes[cell].op else {
                unreachable!("hidden output always follows its cell")
            };
            let h = node.shape.last().copied().unwrap_or(1);
            let rows = g.len() / h;
            if wants(gates) {
                accumulate(&mut grads[gates], act.len(), |buf| {
                    for r in 0..rows {
                        for j in 0..h {
                            let o = act[r * 4 * h + 3 * h + j];
                            buf[r * 4 * h + 3 * h + j] += g[r * h + j] * tanh_c[r * h + j] * o * (1.0 - o);
                        }
                    }
                });
            }
            if wants(cell) {
                accumulate(&mut grads[cell], tanh_c.len(), |buf| {
                    for r in 0..rows {
                        for j in 0..h {
                            let o = act[r * 4 * h + 3 * h + j];
                            let tc = tanh_c[r * h + j];
                            buf[r * h + j] += g[r * h + j] * o * (1.0 - tc * tc);
                        }
                    }
                });
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|v| {
            if v.len() == 1 {
                Ok(v[0])
            } else {
                Err(contract_err!("item() on a var with {} values", v.len()))
            }
        })
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the current value out as a plain tensor.
    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(contract_err!("vars belong to different tapes"))
        }
    }

    fn matmul_impl(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (Some(sa), Some(sb)) = (as_matrix(&a.shape), as_matrix(&b.shape)) else {
                return Err(dim_err!(
                    "matmul needs rank-2 operands, got {:?} and {:?}",
                    a.shape,
                    b.shape
                ));
            };
            let av = MatView::new(&a.value, sa, ta);
            let bv = MatView::new(&b.value, sb, tb);
            if av.cols != bv.rows {
                return Err(dim_err!(
                    "matmul inner dimensions differ: {}x{} by {}x{}",
                    av.rows,
                    av.cols,
                    bv.rows,
                    bv.cols
                ));
            }
            let mut out = vec![0.0; av.rows * bv.cols];
            gemm(av, bv, &mut out, 0.0);
            (vec![av.rows, bv.cols], out)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            rg,
        ))
    }

    /// `self * other`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, false)
    }

    /// `self * other^T`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, true)
    }

    /// `self^T * other`.
    pub fn t_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true, false)
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            };
            if a.shape == b.shape {
                let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
                (a.shape.clone(), v)
            } else if b.value.len() == 1 {
                let y = b.value[0];
                (a.shape.clone(), a.value.iter().map(|&x| f(x, y)).collect())
            } else if a.value.len() == 1 {
                let x = a.value[0];
                (b.shape.clone(), b.value.iter().map(|&y| f(x, y)).collect())
            } else {
                return Err(dim_err!(
                    "elementwise {:?} on shapes {:?} and {:?}",
                    kind,
                    a.shape,
                    b.shape
                ));
            }
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let f = |x: f64| match kind {
                Unary::Neg => -x,
                Unary::Sigmoid => sigmoid(x),
                Unary::Softplus => softplus(x),
                Unary::Tanh => x.tanh(),
                Unary::Abs => x.abs(),
                Unary::Sign => sign(x),
                Unary::Relu => x.max(0.0),
                Unary::Square => x * x,
                Unary::Recip => 1.0 / x,
            };
            (
                a.shape.clone(),
                a.value.iter().map(|&x| f(x)).collect(),
                a.requires_grad,
            )
        };
        self.tape
            .push(shape, value, Op::Unary { kind, a: self.id }, rg)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn sign(self) -> Var<'t> {
        self.unary(Unary::Sign)
    }

    /// `max(0, x)`.
    pub fn max0(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    /// `1 / x`.
    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (
                a.shape.clone(),
                a.value.iter().map(|x| x * factor).collect(),
                a.requires_grad,
            )
        };
        self.tape.push(
            shape,
            value,
            Op::Scale {
                a: self.id,
                factor,
            },
            rg,
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (
                a.shape.clone(),
                a.value.iter().map(|x| x + c).collect(),
                a.requires_grad,
            )
        };
        self.tape.push(shape, value, Op::Offset { a: self.id }, rg)
    }

    pub fn sum(self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.value.iter().sum::<f64>(), a.requires_grad)
        };
        self.tape
            .push(Vec::new(), vec![value], Op::Sum { a: self.id }, rg)
    }

    /// `sum(x^2)`.
    pub fn sum_squares(self) -> Var<'t> {
        self.square().sum()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if numel(&shape) != a.value.len() {
                return Err(dim_err!("cannot reshape {:?} into {:?}", a.shape, shape));
            }
            (a.value.clone(), a.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::Reshape { a: self.id }, rg))
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (shape, value, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let (rows, cols) = rows_cols(&a.shape);
            if start + len > cols || a.shape.is_empty() {
                return Err(dim_err!(
                    "column slice {}..{} of shape {:?}",
                    start,
                    start + len,
                    a.shape
                ));
            }
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&a.value[r * cols + start..r * cols + start + len]);
            }
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = len;
            (shape, out, cols, a.requires_grad)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::SliceCols {
                a: self.id,
                cols,
                start,
            },
            rg,
        ))
    }

    /// Concatenates rank-2 vars along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| contract_err!("concat of zero parts"))?;
        let tape = first.tape;
        for p in parts {
            first.same_tape(p)?;
        }
        let (value, rows, widths) = {
            let nodes = tape.nodes.borrow();
            let rows = as_matrix(&nodes[first.id].shape)
                .ok_or_else(|| dim_err!("concat_cols needs rank-2 parts"))?
                .0;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                match as_matrix(&nodes[p.id].shape) {
                    Some((r, c)) if r == rows => widths.push(c),
                    _ => {
                        return Err(dim_err!(
                            "concat_cols part of shape {:?} with {} rows expected",
                            nodes[p.id].shape,
                            rows
                        ))
                    }
                }
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.id].value[r * w..(r + 1) * w]);
                }
            }
            (out, rows, widths)
        };
        let total: usize = widths.iter().sum();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(
            vec![rows, total],
            value,
            Op::ConcatCols {
                parts: ids.into_iter().zip(widths).collect(),
            },
            rg,
        ))
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var<'t>> {
        if numel(&shape) != index.len() {
            return Err(dim_err!(
                "gather of {} indices into shape {:?}",
                index.len(),
                shape
            ));
        }
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if let Some(&bad) = index.iter().find(|&&i| i >= a.value.len()) {
                return Err(dim_err!(
                    "gather index {} out of range for {} values",
                    bad,
                    a.value.len()
                ));
            }
            (
                index.iter().map(|&i| a.value[i]).collect::<Vec<_>>(),
                a.requires_grad,
            )
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Gather {
                a: self.id,
                index,
            },
            rg,
        ))
    }

    /// Keeps the `k` largest-magnitude entries of each row (last dimension),
    /// zeroing the rest. Ties go to the lower index. Gradients pass through
    /// the retained entries only.
    pub fn top_k_rows(self, k: usize) -> Result<Var<'t>> {
        let (shape, value, keep, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let (rows, cols) = rows_cols(&a.shape);
            if k == 0 || k > cols {
                return Err(dim_err!("top-{} selection on rows of length {}", k, cols));
            }
            let mut keep = vec![false; a.value.len()];
            let mut order: Vec<usize> = Vec::with_capacity(cols);
            for r in 0..rows {
                let row = &a.value[r * cols..(r + 1) * cols];
                order.clear();
                order.extend(0..cols);
                order.sort_by(|&i, &j| row[j].abs().total_cmp(&row[i].abs()).then(i.cmp(&j)));
                for &i in &order[..k] {
                    keep[r * cols + i] = true;
                }
            }
            let value = a
                .value
                .iter()
                .zip(&keep)
                .map(|(&v, &kp)| if kp { v } else { 0.0 })
                .collect();
            (a.shape.clone(), value, keep, a.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, value, Op::Mask { a: self.id, keep }, rg))
    }

    /// One LSTM cell update from pre-activation gates laid out `[i | f | g | o]`
    /// (`rows x 4h`) and the previous cell state (`rows x h`).
    /// Returns `(hidden, cell)`.
    pub fn lstm_cell(gates: Var<'t>, c_prev: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        gates.same_tape(&c_prev)?;
        let tape = gates.tape;
        let (shape, act, cell, tanh_c, hidden) = {
            let nodes = tape.nodes.borrow();
            let (gn, cn) = (&nodes[gates.id], &nodes[c_prev.id]);
            let (Some((rows, g4)), Some((cr, h))) = (as_matrix(&gn.shape), as_matrix(&cn.shape))
            else {
                return Err(dim_err!("lstm_cell needs rank-2 gates and cell state"));
            };
            if cr != rows || g4 != 4 * h {
                return Err(dim_err!(
                    "lstm_cell gates {:?} do not match cell state {:?}",
                    gn.shape,
                    cn.shape
                ));
            }
            let mut act = Vec::with_capacity(rows * g4);
            for (k, &v) in gn.value.iter().enumerate() {
                act.push(if (k % g4) / h == 2 { v.tanh() } else { sigmoid(v) });
            }
            let mut c = Vec::with_capacity(rows * h);
            let mut tc = Vec::with_capacity(rows * h);
            let mut hid = Vec::with_capacity(rows * h);
            for r in 0..rows {
                let a = &act[r * g4..(r + 1) * g4];
                for j in 0..h {
                    let cell = a[h + j] * cn.value[r * h + j] + a[j] * a[2 * h + j];
                    let t = cell.tanh();
                    c.push(cell);
                    tc.push(t);
                    hid.push(a[3 * h + j] * t);
                }
            }
            (vec![rows, h], act, c, tc, hid)
        };
        let rg = tape.requires(&[gates.id, c_prev.id]);
        let cell = tape.push(
            shape.clone(),
            cell,
            Op::LstmCell {
                gates: gates.id,
                c_prev: c_prev.id,
                act,
            },
            rg,
        );
        let hidden = tape.push(
            shape,
            hidden,
            Op::LstmHidden {
                cell: cell.id,
                tanh_c,
            },
            rg,
        );
        Ok((hidden, cell))
    }

    /// Adds a `[cols]` bias to every row of a `rows x cols` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[bias.id]);
            let (_, cols) = rows_cols(&a.shape);
            if b.value.len() != cols {
                return Err(dim_err!("bias of {} values for rows of {cols}", b.value.len()));
            }
            let mut v = a.value.clone();
            for row in v.chunks_mut(cols) {
                row.iter_mut().zip(&b.value).for_each(|(x, y)| *x += y);
            }
            (a.shape.clone(), v, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::AddRow { a: self.id, bias: bias.id }, rg))
    }

    /// `sign(x) * max(0, |x| - theta)`, with `theta` broadcast like [`Var::sub`].
    pub fn soft_threshold(self, theta: Var<'t>) -> Result<Var<'t>> {
        let mag = self.abs().sub(theta)?.max0();
        self.sign().mul(mag)
    }
}
