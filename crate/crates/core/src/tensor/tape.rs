//! Operation tape and reverse-mode backward pass.
//!
//! All values on the tape are matrices; scalars are `1×1`. Each operation
//! validates shapes, computes its value eagerly, and refuses to record a
//! non-finite result.

use std::cell::RefCell;
use std::rc::Rc;

use super::attention::{self, AttnCache, AttnSegment};
use super::gemm::gemm;
use super::params::ParamRef;
use super::{shape_err, Result, Tensor, TensorError};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    SoftmaxRows(usize),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    MeanRowGroups(usize, usize),
    Sum(usize),
    Mean(usize),
    L2NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        cache: Box<AttnCache>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNT(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::MeanRowGroups(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::ConcatRows(xs) => xs.clone(),
            Op::L2NormalizeRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamRef>,
}

/// Ordered record of executed operations. Node ids are topologically sorted
/// by construction, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to one recorded value.
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Result of [`Tape::backward`]: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.get_id(v.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
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

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn leaf(&self, value: Tensor, requires_grad: bool, param: Option<ParamRef>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false, None)
    }

    pub(crate) fn param(&self, value: Tensor, param: ParamRef, requires_grad: bool) -> Var<'_> {
        self.leaf(value, requires_grad, Some(param))
    }

    /// Every parameter leaf on the tape with its node id, in record order.
    pub fn param_leaves(&self) -> Vec<(ParamRef, usize)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect()
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// The tape itself is not modified; calling this twice and accumulating
    /// both results into a parameter set doubles the stored gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Adds `f`'s contribution into the gradient slot of `id`, if it needs one.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            acc(nodes, grads, *a, |ga| {
                gemm(g, m, n, false, bv.data(), k, n, true, ga, 1.0)
            });
            acc(nodes, grads, *b, |gb| {
                gemm(av.data(), m, k, true, g, m, n, false, gb, 1.0)
            });
        }
        Op::MatMulNT(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            acc(nodes, grads, *a, |ga| {
                gemm(g, m, n, false, bv.data(), n, k, false, ga, 1.0)
            });
            acc(nodes, grads, *b, |gb| {
                gemm(g, m, n, true, av.data(), m, k, false, gb, 1.0)
            });
        }
        Op::Add(a, b) => {
            for x in [*a, *b] {
                acc(nodes, grads, x, |gx| add_into(gx, g));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |ga| {
                for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *o += gi * bi;
                }
            });
            acc(nodes, grads, *b, |gb| {
                for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av.data()) {
                    *o += gi * ai;
                }
            });
        }
        Op::AddRow(x, b) => {
            acc(nodes, grads, *x, |gx| add_into(gx, g));
            let cols = val(*b).len();
            acc(nodes, grads, *b, |gb| {
                for row in g.chunks(cols) {
                    add_into(gb, row);
                }
            });
        }
        Op::Scale(x, c) => acc(nodes, grads, *x, |gx| {
            for (o, gi) in gx.iter_mut().zip(g) {
                *o += c * gi;
            }
        }),
        Op::Gelu(x) => {
            let xv = val(*x);
            acc(nodes, grads, *x, |gx| {
                for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                    *o += gi * gelu_grad(*xi);
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value;
            let cols = y.cols();
            acc(nodes, grads, *x, |gx| {
                for ((gxr, gr), yr) in gx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += yi * (gi - dot);
                    }
                }
            });
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            for &x in xs {
                let n = val(x).len();
                acc(nodes, grads, x, |gx| add_into(gx, &g[offset..offset + n]));
                offset += n;
            }
        }
        Op::GatherRows(x, idx) => {
            let cols = val(*x).cols();
            acc(nodes, grads, *x, |gx| {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(
                        &mut gx[src * cols..(src + 1) * cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            });
        }
        Op::MeanRowGroups(x, group) => {
            let cols = val(*x).cols();
            let inv = 1.0 / *group as f64;
            acc(nodes, grads, *x, |gx| {
                for (r, gxr) in gx.chunks_mut(cols).enumerate() {
                    let gr = &g[(r / group) * cols..(r / group + 1) * cols];
                    for (o, gi) in gxr.iter_mut().zip(gr) {
                        *o += gi * inv;
                    }
                }
            });
        }
        Op::Sum(x) => acc(nodes, grads, *x, |gx| {
            gx.iter_mut().for_each(|o| *o += g[0])
        }),
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            acc(nodes, grads, *x, |gx| {
                gx.iter_mut().for_each(|o| *o += g[0] / n)
            });
        }
        Op::L2NormalizeRows { x, norms } => {
            let y = &node.value;
            let cols = y.cols();
            acc(nodes, grads, *x, |gx| {
                for (r, gxr) in gx.chunks_mut(cols).enumerate() {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += (gi - yi * dot) / norms[r];
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gam = val(*gamma).data();
            let cols = gam.len();
            acc(nodes, grads, *beta, |gb| {
                for gr in g.chunks(cols) {
                    add_into(gb, gr);
                }
            });
            acc(nodes, grads, *gamma, |gg| {
                for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for ((o, gi), xi) in gg.iter_mut().zip(gr).zip(xr) {
                        *o += gi * xi;
                    }
                }
            });
            acc(nodes, grads, *x, |gx| {
                let n = cols as f64;
                for (r, ((gxr, gr), xr)) in gx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(xhat.chunks(cols))
                    .enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..cols {
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for j in 0..cols {
                        let d = gr[j] * gam[j];
                        gxr[j] += rstd[r] * (d - mean_d - xr[j] * mean_dx);
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let cols = val(*logits).cols();
            let scale = g[0] / targets.len() as f64;
            acc(nodes, grads, *logits, |gl| {
                for (r, (glr, pr)) in gl.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                    for (o, p) in glr.iter_mut().zip(pr) {
                        *o += scale * p;
                    }
                    glr[targets[r]] -= scale;
                }
            });
        }
        Op::Attention { q, k, v, cache } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let need = [
                nodes[*q].requires_grad,
                nodes[*k].requires_grad,
                nodes[*v].requires_grad,
            ];
            let (dq, dk, dv) = attention::backward(cache, qv, kv, vv, g, need);
            if let Some(d) = dq {
                acc(nodes, grads, *q, |o| add_into(o, &d));
            }
            if let Some(d) = dk {
                acc(nodes, grads, *k, |o| add_into(o, &d));
            }
            if let Some(d) = dv {
                acc(nodes, grads, *v, |o| add_into(o, &d));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax with max subtraction, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(shape_err(
            op,
            format!("expected a matrix, got {:?}", t.shape()),
        ))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to the recorded value.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        require_matrix("matmul", &a)?;
        require_matrix("matmul", &b)?;
        if a.cols() != b.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        gemm(a.data(), m, k, false, b.data(), k, n, false, &mut out, 0.0);
        self.tape.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMul(self.id, other.id),
            "matmul",
        )
    }

    /// Matrix product with the second operand transposed: `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        require_matrix("matmul_t", &a)?;
        require_matrix("matmul_t", &b)?;
        if a.cols() != b.cols() {
            return Err(shape_err(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let mut out = vec![0.0; m * n];
        gemm(a.data(), m, k, false, b.data(), n, k, true, &mut out, 0.0);
        self.tape.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMulNT(self.id, other.id),
            "matmul_t",
        )
    }

    fn zip_same(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_same(other, "add", |x, y| x + y)?;
        self.tape.push(t, Op::Add(self.id, other.id), "add")
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_same(other, "mul", |x, y| x * y)?;
        self.tape.push(t, Op::Mul(self.id, other.id), "mul")
    }

    /// Adds a `1×cols` row vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        require_matrix("add_row", &x)?;
        if b.len() != x.cols() {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", x.shape(), b.shape()),
            ));
        }
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            add_into(row, b.data());
        }
        self.tape.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::AddRow(self.id, bias.id),
            "add_row",
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let x = self.value();
        let data = x.data().iter().map(|v| v * c).collect();
        self.tape.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::Scale(self.id, c),
            "scale",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t>> {
        let x = self.value();
        let data = x.data().iter().map(|v| gelu(*v)).collect();
        self.tape.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::Gelu(self.id),
            "gelu",
        )
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        require_matrix("softmax_rows", &x)?;
        if !x.is_finite() {
            return Err(TensorError::NonFinite {
                op: "softmax_rows input",
            });
        }
        let cols = x.cols();
        let mut out = vec![0.0; x.len()];
        if cols > 0 {
            for (o, r) in out.chunks_mut(cols).zip(x.data().chunks(cols)) {
                softmax_row(r, o);
            }
        }
        self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::SoftmaxRows(self.id),
            "softmax_rows",
        )
    }

    /// Stacks matrices with equal column counts; empty inputs are allowed.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.same_tape(p);
            let v = p.value();
            require_matrix("concat_rows", &v)?;
            if v.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("{} vs {} columns", v.cols(), cols),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids = parts.iter().map(|p| p.id).collect();
        first.tape.push(
            Tensor::matrix(rows, cols, data)?,
            Op::ConcatRows(ids),
            "concat_rows",
        )
    }

    /// Selects rows by index (repeats allowed); the backward pass scatter-adds.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        require_matrix("gather_rows", &x)?;
        let cols = x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= x.rows() {
                return Err(shape_err("gather_rows", format!("row {i} of {}", x.rows())));
            }
            data.extend_from_slice(x.row(i));
        }
        self.tape.push(
            Tensor::matrix(idx.len(), cols, data)?,
            Op::GatherRows(self.id, idx.to_vec()),
            "gather_rows",
        )
    }

    /// Averages consecutive groups of `group` rows: `(n·group)×c -> n×c`.
    pub fn mean_row_groups(self, group: usize) -> Result<Var<'t>> {
        let x = self.value();
        require_matrix("mean_row_groups", &x)?;
        if group == 0 || !x.rows().is_multiple_of(group) {
            return Err(shape_err(
                "mean_row_groups",
                format!("{} rows in groups of {group}", x.rows()),
            ));
        }
        let cols = x.cols();
        let n = x.rows() / group;
        let mut out = vec![0.0; n * cols];
        for r in 0..x.rows() {
            add_into(
                &mut out[(r / group) * cols..(r / group + 1) * cols],
                x.row(r),
            );
        }
        out.iter_mut().for_each(|o| *o /= group as f64);
        self.tape.push(
            Tensor::matrix(n, cols, out)?,
            Op::MeanRowGroups(self.id, group),
            "mean_row_groups",
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), "mean")
    }

    /// Scales each row to unit Euclidean norm; a zero row is an error.
    pub fn l2_normalize_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        require_matrix("l2_normalize_rows", &x)?;
        let cols = x.cols();
        let mut norms = Vec::with_capacity(x.rows());
        let mut out = x.data().to_vec();
        for (r, row) in out.chunks_mut(cols.max(1)).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::Invalid(format!(
                    "row {r} has zero norm; cosine similarity is undefined"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::L2NormalizeRows { x: self.id, norms },
            "l2_normalize_rows",
        )
    }

    /// Per-row layer normalization with learned gain and bias (`1×cols` each).
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        require_matrix("layer_norm", &x)?;
        let cols = x.cols();
        if g.len() != cols || b.len() != cols || cols == 0 {
            return Err(shape_err(
                "layer_norm",
                format!("{:?} with gain {:?}", x.shape(), g.shape()),
            ));
        }
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(x.rows());
        let mut out = vec![0.0; x.len()];
        for r in 0..x.rows() {
            let row = x.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..cols {
                let h = (row[j] - mu) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g.data()[j] + b.data()[j];
            }
        }
        self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        require_matrix("cross_entropy", &x)?;
        if targets.len() != x.rows() || targets.is_empty() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), x.rows()),
            ));
        }
        let cols = x.cols();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(TensorError::TargetOutOfRange {
                    target: t,
                    classes: cols,
                });
            }
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for j in 0..cols {
                probs[r * cols + j] = (row[j] - lse).exp();
            }
        }
        loss /= targets.len() as f64;
        self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Fused multi-head scaled dot-product attention over already-projected
    /// queries, keys and values. See [`super::attention`].
    pub fn attention_core(
        self,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        segments: &[AttnSegment],
        causal: bool,
    ) -> Result<Var<'t>> {
        self.same_tape(&k);
        self.same_tape(&v);
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (out, cache) = attention::forward(&qv, &kv, &vv, heads, segments, causal)?;
        self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                cache: Box::new(cache),
            },
            "attention",
        )
    }
}
