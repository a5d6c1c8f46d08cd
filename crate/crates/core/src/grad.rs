//! Reverse-mode differentiation over dense row-major 2-D tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value;
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because a node can only refer to earlier nodes.
//!
//! Besides elementwise and linear-algebra primitives the tape has one fused
//! node, [`Tape::ph_log_pdf`], that evaluates series canonical phase-type
//! log-densities row by row and stores their local gradients at record time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ph::{canonical_log_pdf_grad, UniformizationConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values do not fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// A single-row tensor.
    pub fn row(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let n = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `a^T b` without materialising the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, b.cols);
    let n = b.cols;
    for r in 0..a.rows {
        let brow = &b.data[r * n..(r + 1) * n];
        for i in 0..a.cols {
            let ari = a.data[r * a.cols + i];
            if ari == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ari * bv;
            }
        }
    }
    out
}

/// `a b^T`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        for j in 0..b.rows {
            let brow = &b.data[j * b.cols..(j + 1) * b.cols];
            out.data[i * b.rows + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Matmul(Var, Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Tanh(Var),
    Softmax { x: Var, group: usize },
    Cumsum { x: Var, group: usize },
    Clamp { x: Var, lo: f64, hi: f64 },
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SliceCols { x: Var, start: usize },
    PhLogPdf {
        alpha: Var,
        lambda: Var,
        group: usize,
        d_alpha: Tensor,
        d_lambda: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape for evaluation only: fused nodes skip their local gradients
    /// and [`Tape::backward`] is rejected.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `v`.
    /// Nodes the root does not depend on report zeros.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, what)?;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` with the single row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if rb != 1 || cb != ca {
            return Err(Error::Shape(format!("add_row: {ra}x{ca} + {rb}x{cb}")));
        }
        let mut value = self.value(a).clone();
        let bias = &self.nodes[b.0].value.data;
        for r in 0..ra {
            for (o, &bv) in value.data[r * ca..(r + 1) * ca].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Elementwise clamp; the gradient passes through inside `[lo, hi]` and
    /// is zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    fn check_group(&self, x: Var, group: usize, what: &str) -> Result<()> {
        let cols = self.shape(x).1;
        if group == 0 || !cols.is_multiple_of(group) {
            return Err(Error::Shape(format!(
                "{what}: {cols} columns do not split into groups of {group}"
            )));
        }
        Ok(())
    }

    /// Softmax over consecutive column groups of width `group`.
    pub fn softmax(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check_group(x, group, "softmax")?;
        let mut value = self.value(x).clone();
        for chunk in value.data.chunks_mut(group) {
            let mx = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in chunk.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push(value, Op::Softmax { x, group }))
    }

    /// Running sum within consecutive column groups of width `group`.
    pub fn cumsum(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check_group(x, group, "cumsum")?;
        let mut value = self.value(x).clone();
        for chunk in value.data.chunks_mut(group) {
            let mut acc = 0.0;
            for v in chunk.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        Ok(self.push(value, Op::Cumsum { x, group }))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Per-row sum, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = (0..t.rows).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor {
            rows: t.rows,
            cols: 1,
            data,
        };
        self.push(value, Op::SumCols(x))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        if start + width > t.cols {
            return Err(Error::Shape(format!(
                "slice {start}..{} of {} columns",
                start + width,
                t.cols
            )));
        }
        let mut data = Vec::with_capacity(t.rows * width);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + width]);
        }
        let value = Tensor {
            rows: t.rows,
            cols: width,
            data,
        };
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Series canonical phase-type log-densities.
    ///
    /// `alpha` and `lambda` hold, per row, `D` consecutive groups of `group`
    /// entries (initial probabilities and non-decreasing rates); they may
    /// also be a single row broadcast over all rows of `x`. `x` is an
    /// `r x D` constant. The result is `r x D` with entry `(i, j)` equal to
    /// `ln f_j(x_ij)`.
    pub fn ph_log_pdf(
        &mut self,
        alpha: Var,
        lambda: Var,
        x: &Tensor,
        group: usize,
        cfg: &UniformizationConfig,
    ) -> Result<Var> {
        let (ra, ca) = self.shape(alpha);
        if self.shape(lambda) != (ra, ca) {
            return Err(Error::Shape("ph_log_pdf: alpha and lambda differ in shape".into()));
        }
        if ca != x.cols * group || !(ra == x.rows || ra == 1) {
            return Err(Error::Shape(format!(
                "ph_log_pdf: parameters {ra}x{ca} do not match data {}x{} with {group} phases",
                x.rows, x.cols
            )));
        }
        let want = self.grad_enabled;
        let mut out = Tensor::zeros(x.rows, x.cols);
        let mut d_alpha = Tensor::zeros(if want { x.rows } else { 0 }, ca);
        let mut d_lambda = Tensor::zeros(if want { x.rows } else { 0 }, ca);
        let av = &self.nodes[alpha.0].value;
        let lv = &self.nodes[lambda.0].value;
        for r in 0..x.rows {
            let pr = if ra == 1 { 0 } else { r };
            for j in 0..x.cols {
                let span = pr * ca + j * group..pr * ca + (j + 1) * group;
                let g = canonical_log_pdf_grad(
                    &av.data[span.clone()],
                    &lv.data[span],
                    x.get(r, j),
                    cfg,
                    want,
                )?;
                out.data[r * x.cols + j] = g.value;
                if want {
                    let dst = r * ca + j * group..r * ca + (j + 1) * group;
                    d_alpha.data[dst.clone()].copy_from_slice(&g.d_alpha);
                    d_lambda.data[dst].copy_from_slice(&g.d_lambda);
                }
            }
        }
        Ok(self.push(
            out,
            Op::PhLogPdf {
                alpha,
                lambda,
                group,
                d_alpha,
                d_lambda,
            },
        ))
    }

    /// Populates gradients of the scalar `root` for every node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::invalid("backward on an inference tape"));
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.data.iter_mut().zip(&delta.data) {
                    *a += d;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl Fn(&Tensor) -> Tensor) {
        let delta = f(&self.nodes[v.0].value);
        self.accumulate(v, delta);
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let out = self.nodes[idx].value.clone();
        // Take the op out temporarily so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).clone();
                let vb = self.value(*b).clone();
                self.accumulate(*a, zip_with(g, &vb, |x, y| x * y));
                self.accumulate(*b, zip_with(g, &va, |x, y| x * y));
            }
            Op::AddRow(a, b) => {
                self.accumulate(*a, g.clone());
                let mut db = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, &gv) in db.data.iter_mut().zip(g.row_slice(r)) {
                        *d += gv;
                    }
                }
                self.accumulate(*b, db);
            }
            Op::Matmul(a, b) => {
                let va = self.value(*a).clone();
                let vb = self.value(*b).clone();
                self.accumulate(*a, matmul_nt(g, &vb));
                self.accumulate(*b, matmul_tn(&va, g));
            }
            Op::Exp(x) => self.accumulate(*x, zip_with(g, &out, |gv, y| gv * y)),
            Op::Log(x) => self.accumulate_with(*x, |vx| zip_with(g, vx, |gv, v| gv / v)),
            Op::Softplus(x) => self.accumulate_with(*x, |vx| zip_with(g, vx, |gv, v| gv * sigmoid(v))),
            Op::Relu(x) => self.accumulate_with(*x, |vx| {
                zip_with(g, vx, |gv, v| if v > 0.0 { gv } else { 0.0 })
            }),
            Op::Tanh(x) => self.accumulate(*x, zip_with(g, &out, |gv, y| gv * (1.0 - y * y))),
            Op::Softmax { x, group } => {
                let mut d = g.clone();
                for (dc, yc) in d.data.chunks_mut(*group).zip(out.data.chunks(*group)) {
                    let dot: f64 = dc.iter().zip(yc).map(|(a, b)| a * b).sum();
                    for (dv, &y) in dc.iter_mut().zip(yc) {
                        *dv = y * (*dv - dot);
                    }
                }
                self.accumulate(*x, d);
            }
            Op::Cumsum { x, group } => {
                let mut d = g.clone();
                for chunk in d.data.chunks_mut(*group) {
                    let mut acc = 0.0;
                    for v in chunk.iter_mut().rev() {
                        acc += *v;
                        *v = acc;
                    }
                }
                self.accumulate(*x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate_with(*x, |vx| {
                    zip_with(g, vx, |gv, v| if v >= lo && v <= hi { gv } else { 0.0 })
                })
            }
            Op::Neg(x) => self.accumulate(*x, g.map(|v| -v)),
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(*x, g.map(|v| v * c))
            }
            Op::AddScalar(x) => self.accumulate(*x, g.clone()),
            Op::Square(x) => self.accumulate_with(*x, |vx| zip_with(g, vx, |gv, v| 2.0 * gv * v)),
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(*x, Tensor::full(r, c, g.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(*x, Tensor::full(r, c, g.item() / (r * c) as f64));
            }
            Op::SumCols(x) => {
                let (r, c) = self.shape(*x);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.data[i * c..(i + 1) * c].fill(g.data[i]);
                }
                self.accumulate(*x, d);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.data[i * c + start..i * c + start + g.cols].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(*x, d);
            }
            Op::PhLogPdf {
                alpha,
                lambda,
                group,
                d_alpha,
                d_lambda,
            } => {
                let (ra, ca) = self.shape(*alpha);
                let mut ga = Tensor::zeros(ra, ca);
                let mut gl = Tensor::zeros(ra, ca);
                for r in 0..g.rows {
                    let pr = if ra == 1 { 0 } else { r };
                    for j in 0..g.cols {
                        let gv = g.get(r, j);
                        for i in j * group..(j + 1) * group {
                            ga.data[pr * ca + i] += gv * d_alpha.data[r * ca + i];
                            gl.data[pr * ca + i] += gv * d_lambda.data[r * ca + i];
                        }
                    }
                }
                self.accumulate(*alpha, ga);
                self.accumulate(*lambda, gl);
            }
        }
        self.nodes[idx].op = op;
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
        }
    }

    fn eval(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Softplus => softplus(v),
        }
    }
}

/// Affine layer `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor {
                rows: fan_in,
                cols: fan_out,
                data,
            },
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        for r in 0..y.rows {
            for (o, &b) in y.data[r * y.cols..(r + 1) * y.cols].iter_mut().zip(&self.bias.data) {
                *o += b;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_row(h, self.bias)
    }
}

/// Multi-layer perceptron: affine layers with the activation between them
/// and none after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpParams {
    /// `sizes = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Ok(Self { layers, activation })
    }

    /// Checks that consecutive layers chain.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("MLP has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols) {
                return Err(Error::Shape(format!("layer {i}: bias does not match weight")));
            }
            if i > 0 && self.layers[i - 1].weight.cols != l.weight.rows {
                return Err(Error::Shape(format!("layer {i} input does not match layer {}", i - 1)));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            activation: self.activation,
        }
    }

    /// Tape-free forward pass, used for inference.
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward_plain(&h)?;
            if i < last {
                h = h.map(|v| self.activation.eval(v));
            }
        }
        Ok(h)
    }

    /// Parameter tensors in a fixed order (per layer: weight, bias).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
    pub activation: Activation,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let want = self.layers[0].weight;
        let (in_dim, got) = (tape.shape(want).0, tape.shape(input).1);
        if in_dim != got {
            return Err(Error::Shape(format!(
                "MLP expects {in_dim} input columns, got {got}"
            )));
        }
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h)?;
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Vars in the same order as [`MlpParams::params_mut`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}
