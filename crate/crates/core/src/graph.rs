//! Tape-based reverse-mode differentiation over tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into the [`Param`]
//! handles that were inserted as leaves. Graphs are cheap and single-use: the
//! training loop builds a fresh one per sample.
//!
//! The differentiable surface is restricted to vectors (`[n]`, with scalars as
//! `[1]`) and matrices (`[m,n]`); forward kernels are shared with the plain
//! inference path in [`crate::tensor`] so both compute bit-identical values.

use crate::error::{DrlError, Result};
use crate::param::Param;
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Val, Val),
    Transpose(Val),
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Div(Val, Val),
    AddRow(Val, Val),
    Scale(Val, f64),
    AddConst(Val),
    Exp(Val),
    Ln(Val),
    Sqrt(Val),
    Gelu(Val),
    Sigmoid(Val),
    Softplus(Val),
    SoftmaxRows(Val),
    LayerNorm { x: Val, gain: Val, bias: Val },
    Sum(Val),
    Mean(Val),
    ColSums(Val),
    Row(Val, usize),
    Reshape(Val),
    SliceCols(Val, usize, usize),
    ConcatCols(Vec<Val>),
    ConcatRows(Vec<Val>),
    Concat(Vec<Val>),
    Elem(Val, usize),
    DropElem(Val, usize),
    LogSumExp(Val),
    BScale(Val, Val),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires: bool,
    op: Op,
    param: Option<Param>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool, param: Option<Param>) -> Result<Val> {
        if !value.is_finite() {
            return Err(DrlError::NonFinite {
                op: op_name(&op),
            });
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
            param,
        });
        Ok(Val(idx))
    }

    /// Untracked input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Val {
        self.push(t, Op::Leaf, false, None)
            .expect("finite constant")
    }

    /// Tracked input whose gradient can be read back after `backward`.
    pub fn var(&mut self, t: Tensor) -> Val {
        self.push(t, Op::Leaf, true, None).expect("finite var")
    }

    /// Inserts a parameter leaf. Frozen parameters enter as constants, so
    /// no tape is kept behind them and no gradient reaches them.
    pub fn param(&mut self, p: &Param) -> Val {
        let value = p.value_clone();
        if p.frozen() {
            self.constant(value)
        } else {
            self.push(value, Op::Leaf, true, Some(p.clone()))
                .expect("finite param")
        }
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`. Zero
    /// tensors are returned for tracked leaves the loss does not reach.
    pub fn grad(&self, v: Val) -> Tensor {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()))
    }

    fn requires(&self, v: Val) -> bool {
        self.nodes[v.0].requires
    }

    fn shape(&self, v: Val) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    // -- op builders --------------------------------------------------------

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Matmul(a, b), req, None)
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(DrlError::ShapeMismatch {
                op: "transpose",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let req = self.requires(a);
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), req, None)
    }

    fn binary_same_shape(&mut self, op: &'static str, a: Val, b: Val) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DrlError::ShapeMismatch {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), req, None)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Sub(a, b), req, None)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), req, None)
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary_same_shape("div", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Div(a, b), req, None)
    }

    /// `a[m,n] + row[n]`, broadcast over rows (bias add).
    pub fn add_row(&mut self, a: Val, row: Val) -> Result<Val> {
        let (am, an) = {
            let t = self.value(a);
            if t.rank() != 2 {
                return Err(DrlError::ShapeMismatch {
                    op: "add_row",
                    left: t.shape().to_vec(),
                    right: self.shape(row),
                });
            }
            (t.rows(), t.cols())
        };
        if self.shape(row) != vec![an] {
            return Err(DrlError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a),
                right: self.shape(row),
            });
        }
        let mut out = self.value(a).data().to_vec();
        let r = self.value(row).data().to_vec();
        for i in 0..am {
            for j in 0..an {
                out[i * an + j] += r[j];
            }
        }
        let req = self.requires(a) || self.requires(row);
        self.push(Tensor::new(vec![am, an], out)?, Op::AddRow(a, row), req, None)
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Result<Val> {
        let out = map(self.value(a), |x| x * c);
        let req = self.requires(a);
        self.push(out, Op::Scale(a, c), req, None)
    }

    pub fn add_const(&mut self, a: Val, c: f64) -> Result<Val> {
        let out = map(self.value(a), |x| x + c);
        let req = self.requires(a);
        self.push(out, Op::AddConst(a), req, None)
    }

    pub fn exp(&mut self, a: Val) -> Result<Val> {
        let out = map(self.value(a), f64::exp);
        let req = self.requires(a);
        self.push(out, Op::Exp(a), req, None)
    }

    pub fn ln(&mut self, a: Val) -> Result<Val> {
        let out = map(self.value(a), f64::ln);
        let req = self.requires(a);
        self.push(out, Op::Ln(a), req, None)
    }

    pub fn sqrt(&mut self, a: Val) -> Result<Val> {
        let out = map(self.value(a), f64::sqrt);
        let req = self.requires(a);
        self.push(out, Op::Sqrt(a), req, None)
    }

    pub fn gelu(&mut self, a: Val) -> Result<Val> {
        let out = map(self.value(a), tensor::gelu);
        let req = self.requires(a);
        self.push(out, Op::Gelu(a), req, None)
    }

    pub fn sigmoid(&mut self, a: Val) -> Result<Val> {
        let out = map(self.value(a), tensor::sigmoid);
        let req = self.requires(a);
        self.push(out, Op::Sigmoid(a), req, None)
    }

    pub fn softplus(&mut self, a: Val) -> Result<Val> {
        let out = map(self.value(a), tensor::softplus);
        let req = self.requires(a);
        self.push(out, Op::Softplus(a), req, None)
    }

    pub fn softmax_rows(&mut self, a: Val) -> Result<Val> {
        let out = tensor::softmax_rows(self.value(a))?;
        let req = self.requires(a);
        self.push(out, Op::SoftmaxRows(a), req, None)
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Val, gain: Val, bias: Val) -> Result<Val> {
        let (m, n) = {
            let t = self.value(x);
            if t.rank() != 2 {
                return Err(DrlError::ShapeMismatch {
                    op: "layer_norm",
                    left: t.shape().to_vec(),
                    right: vec![],
                });
            }
            (t.rows(), t.cols())
        };
        if self.shape(gain) != vec![n] || self.shape(bias) != vec![n] {
            return Err(DrlError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(gain),
                right: self.shape(bias),
            });
        }
        let xs = self.value(x).data().to_vec();
        let gd = self.value(gain).data().to_vec();
        let bd = self.value(bias).data().to_vec();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let (xhat, _) = ln_normalize(row);
            for j in 0..n {
                out[i * n + j] = gd[j] * xhat[j] + bd[j];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm { x, gain, bias },
            req,
            None,
        )
    }

    pub fn sum(&mut self, a: Val) -> Result<Val> {
        let s: f64 = self.value(a).data().iter().sum();
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum(a), req, None)
    }

    pub fn mean(&mut self, a: Val) -> Result<Val> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::Mean(a), req, None)
    }

    /// Column sums of a matrix: `[m,n] -> [n]`.
    pub fn col_sums(&mut self, a: Val) -> Result<Val> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(DrlError::ShapeMismatch {
                op: "col_sums",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += t.data()[i * n + j];
            }
        }
        let req = self.requires(a);
        self.push(Tensor::vector(out), Op::ColSums(a), req, None)
    }

    /// Extracts row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Val, i: usize) -> Result<Val> {
        let t = self.value(a);
        if t.rank() != 2 || i >= t.rows() {
            return Err(DrlError::ShapeMismatch {
                op: "row",
                left: t.shape().to_vec(),
                right: vec![i],
            });
        }
        let out = Tensor::vector(t.row_slice(i).to_vec());
        let req = self.requires(a);
        self.push(out, Op::Row(a, i), req, None)
    }

    pub fn reshape(&mut self, a: Val, shape: Vec<usize>) -> Result<Val> {
        let out = self.value(a).reshaped(shape)?;
        let req = self.requires(a);
        self.push(out, Op::Reshape(a), req, None)
    }

    pub fn slice_cols(&mut self, a: Val, c0: usize, c1: usize) -> Result<Val> {
        let t = self.value(a);
        if t.rank() != 2 || c1 > t.cols() || c0 >= c1 {
            return Err(DrlError::ShapeMismatch {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![c0, c1],
            });
        }
        let (m, n, w) = (t.rows(), t.cols(), c1 - c0);
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&t.data()[i * n + c0..i * n + c1]);
        }
        let req = self.requires(a);
        self.push(
            Tensor::new(vec![m, w], out)?,
            Op::SliceCols(a, c0, c1),
            req,
            None,
        )
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(DrlError::Config("concat_cols of zero parts".into()));
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != m {
                return Err(DrlError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                out[i * n + off..i * n + off + w].copy_from_slice(self.value(p).row_slice(i));
                off += w;
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatCols(parts.to_vec()),
            req,
            None,
        )
    }

    /// Vertical stacking of matrices sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(DrlError::Config("concat_rows of zero parts".into()));
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != n {
                return Err(DrlError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            m += t.rows();
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            Tensor::new(vec![m, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            req,
            None,
        )
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(DrlError::Config("concat of zero parts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(DrlError::ShapeMismatch {
                    op: "concat",
                    left: t.shape().to_vec(),
                    right: vec![],
                });
            }
            data.extend_from_slice(t.data());
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), req, None)
    }

    /// Element `i` of a vector as a scalar.
    pub fn elem(&mut self, a: Val, i: usize) -> Result<Val> {
        let t = self.value(a);
        if t.rank() != 1 || i >= t.numel() {
            return Err(DrlError::ShapeMismatch {
                op: "elem",
                left: t.shape().to_vec(),
                right: vec![i],
            });
        }
        let out = Tensor::scalar(t.data()[i]);
        let req = self.requires(a);
        self.push(out, Op::Elem(a, i), req, None)
    }

    /// Vector with element `i` removed.
    pub fn drop_elem(&mut self, a: Val, i: usize) -> Result<Val> {
        let t = self.value(a);
        if t.rank() != 1 || i >= t.numel() || t.numel() < 2 {
            return Err(DrlError::ShapeMismatch {
                op: "drop_elem",
                left: t.shape().to_vec(),
                right: vec![i],
            });
        }
        let mut data = Vec::with_capacity(t.numel() - 1);
        for (j, &v) in t.data().iter().enumerate() {
            if j != i {
                data.push(v);
            }
        }
        let req = self.requires(a);
        self.push(Tensor::vector(data), Op::DropElem(a, i), req, None)
    }

    /// Stabilized `log Σ exp` over a vector.
    pub fn logsumexp(&mut self, a: Val) -> Result<Val> {
        let t = self.value(a);
        if t.rank() != 1 {
            return Err(DrlError::ShapeMismatch {
                op: "logsumexp",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let out = Tensor::scalar(tensor::logsumexp(t.data()));
        let req = self.requires(a);
        self.push(out, Op::LogSumExp(a), req, None)
    }

    /// Broadcast multiply by a scalar node: `a * s` where `s` has shape `[1]`.
    pub fn bscale(&mut self, a: Val, s: Val) -> Result<Val> {
        if self.shape(s) != vec![1] {
            return Err(DrlError::ShapeMismatch {
                op: "bscale",
                left: self.shape(a),
                right: self.shape(s),
            });
        }
        let sv = self.value(s).item();
        let out = map(self.value(a), |x| x * sv);
        let req = self.requires(a) || self.requires(s);
        self.push(out, Op::BScale(a, s), req, None)
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar `loss`, seeding with `seed` (use `1/batch`
    /// to accumulate batch-mean gradients). Gradients land in the non-frozen
    /// `Param` leaves and in tracked `var` leaves.
    pub fn backward(&mut self, loss: Val, seed: f64) -> Result<()> {
        if self.shape(loss) != vec![1] {
            return Err(DrlError::ShapeMismatch {
                op: "backward",
                left: self.shape(loss),
                right: vec![1],
            });
        }
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.fill(0.0);
            }
        }
        if !self.nodes[loss.0].requires {
            return Ok(()); // loss does not depend on anything tracked
        }
        *self.grad_buf(loss) = Tensor::scalar(seed);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g)?;
        }

        for n in &self.nodes {
            if let (Some(p), Some(g)) = (&n.param, &n.grad) {
                p.add_grad(g, 1.0);
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Val) -> &mut Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.nodes[v.0].grad.get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn add_grad_tensor(&mut self, v: Val, t: &Tensor, scale: f64) {
        if self.requires(v) {
            self.grad_buf(v).add_scaled(t, scale);
        }
    }

    fn add_grad_with(&mut self, v: Val, f: impl FnOnce(&mut [f64])) {
        if self.requires(v) {
            f(self.grad_buf(v).data_mut());
        }
    }

    fn propagate(&mut self, node_idx: usize, op: &Op, g: &Tensor) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.requires(a) {
                    let da = tensor::matmul_nt(g, self.value(b))?;
                    self.add_grad_tensor(a, &da, 1.0);
                }
                if self.requires(b) {
                    let db = tensor::matmul_tn(self.value(a), g)?;
                    self.add_grad_tensor(b, &db, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j * m + i] += gd[i * n + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.add_grad_tensor(a, g, 1.0);
                self.add_grad_tensor(b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.add_grad_tensor(a, g, 1.0);
                self.add_grad_tensor(b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.requires(a) {
                    let bd = self.value(b).clone();
                    let gd = g.data().to_vec();
                    self.add_grad_with(a, |buf| {
                        for (k, x) in buf.iter_mut().enumerate() {
                            *x += gd[k] * bd.data()[k];
                        }
                    });
                }
                if self.requires(b) {
                    let ad = self.value(a).clone();
                    let gd = g.data().to_vec();
                    self.add_grad_with(b, |buf| {
                        for (k, x) in buf.iter_mut().enumerate() {
                            *x += gd[k] * ad.data()[k];
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let ad = self.value(a).clone();
                let bd = self.value(b).clone();
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        *x += gd[k] / bd.data()[k];
                    }
                });
                self.add_grad_with(b, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        *x -= gd[k] * ad.data()[k] / (bd.data()[k] * bd.data()[k]);
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.add_grad_tensor(a, g, 1.0);
                if self.requires(r) {
                    let (m, n) = (g.rows(), g.cols());
                    let gd = g.data().to_vec();
                    self.add_grad_with(r, |buf| {
                        for i in 0..m {
                            for j in 0..n {
                                buf[j] += gd[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::Scale(a, c) => self.add_grad_tensor(a, g, c),
            Op::AddConst(a) => self.add_grad_tensor(a, g, 1.0),
            Op::Exp(a) => {
                let out = self.nodes[node_idx].value.clone();
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        *x += gd[k] * out.data()[k];
                    }
                });
            }
            Op::Ln(a) => {
                let av = self.value(a).clone();
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        *x += gd[k] / av.data()[k];
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = self.nodes[node_idx].value.clone();
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        *x += gd[k] / (2.0 * out.data()[k]);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(a).clone();
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        *x += gd[k] * tensor::gelu_grad(av.data()[k]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[node_idx].value.clone();
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        let s = out.data()[k];
                        *x += gd[k] * s * (1.0 - s);
                    }
                });
            }
            Op::Softplus(a) => {
                let av = self.value(a).clone();
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        *x += gd[k] * tensor::sigmoid(av.data()[k]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let out = self.nodes[node_idx].value.clone();
                let (m, n) = (out.rows(), out.cols());
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for i in 0..m {
                        let p = &out.data()[i * n..(i + 1) * n];
                        let gr = &gd[i * n..(i + 1) * n];
                        let dot: f64 = gr.iter().zip(p.iter()).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            buf[i * n + j] += p[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(x).clone();
                let gv = self.value(gain).clone();
                let (m, n) = (xv.rows(), xv.cols());
                let gd = g.data().to_vec();
                if self.requires(gain) {
                    self.add_grad_with(gain, |buf| {
                        for i in 0..m {
                            let (xhat, _) = ln_normalize(xv.row_slice(i));
                            for j in 0..n {
                                buf[j] += gd[i * n + j] * xhat[j];
                            }
                        }
                    });
                }
                if self.requires(bias) {
                    self.add_grad_with(bias, |buf| {
                        for i in 0..m {
                            for j in 0..n {
                                buf[j] += gd[i * n + j];
                            }
                        }
                    });
                }
                if self.requires(x) {
                    self.add_grad_with(x, |buf| {
                        for i in 0..m {
                            let (xhat, rstd) = ln_normalize(xv.row_slice(i));
                            let gr = &gd[i * n..(i + 1) * n];
                            let h: Vec<f64> =
                                (0..n).map(|j| gr[j] * gv.data()[j]).collect();
                            let mean_h: f64 = h.iter().sum::<f64>() / n as f64;
                            let mean_hx: f64 = h
                                .iter()
                                .zip(xhat.iter())
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / n as f64;
                            for j in 0..n {
                                buf[i * n + j] += rstd * (h[j] - mean_h - xhat[j] * mean_hx);
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.add_grad_with(a, |buf| {
                    for x in buf.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                let gv = g.item() / n;
                self.add_grad_with(a, |buf| {
                    for x in buf.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::ColSums(a) => {
                let (m, n) = {
                    let t = self.value(a);
                    (t.rows(), t.cols())
                };
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += gd[j];
                        }
                    }
                });
            }
            Op::Row(a, i) => {
                let n = g.numel();
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for j in 0..n {
                        buf[i * n + j] += gd[j];
                    }
                });
            }
            Op::Reshape(a) => {
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        *x += gd[k];
                    }
                });
            }
            Op::SliceCols(a, c0, c1) => {
                let n = self.value(a).cols();
                let (m, w) = (g.rows(), g.cols());
                debug_assert_eq!(w, c1 - c0);
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    for i in 0..m {
                        for j in 0..w {
                            buf[i * n + c0 + j] += gd[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(ref parts) => {
                let m = g.rows();
                let n = g.cols();
                let gd = g.data().to_vec();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires(p) {
                        let start = off;
                        self.add_grad_with(p, |buf| {
                            for i in 0..m {
                                for j in 0..w {
                                    buf[i * w + j] += gd[i * n + start + j];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let n = g.cols();
                let gd = g.data().to_vec();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.requires(p) {
                        let start = off;
                        self.add_grad_with(p, |buf| {
                            for k in 0..rows * n {
                                buf[k] += gd[start * n + k];
                            }
                        });
                    }
                    off += rows;
                }
            }
            Op::Concat(ref parts) => {
                let gd = g.data().to_vec();
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires(p) {
                        let start = off;
                        self.add_grad_with(p, |buf| {
                            for k in 0..len {
                                buf[k] += gd[start + k];
                            }
                        });
                    }
                    off += len;
                }
            }
            Op::Elem(a, i) => {
                let gv = g.item();
                self.add_grad_with(a, |buf| buf[i] += gv);
            }
            Op::DropElem(a, i) => {
                let gd = g.data().to_vec();
                self.add_grad_with(a, |buf| {
                    let mut src = 0;
                    for (j, x) in buf.iter_mut().enumerate() {
                        if j == i {
                            continue;
                        }
                        *x += gd[src];
                        src += 1;
                    }
                });
            }
            Op::LogSumExp(a) => {
                let av = self.value(a).clone();
                let mx = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = av.data().iter().map(|&x| (x - mx).exp()).collect();
                let s: f64 = exps.iter().sum();
                let gv = g.item();
                self.add_grad_with(a, |buf| {
                    for (k, x) in buf.iter_mut().enumerate() {
                        *x += gv * exps[k] / s;
                    }
                });
            }
            Op::BScale(a, s) => {
                let sv = self.value(s).item();
                self.add_grad_tensor(a, g, sv);
                if self.requires(s) {
                    let av = self.value(a).clone();
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(av.data().iter())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.add_grad_with(s, |buf| buf[0] += dot);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Sqrt(..) => "sqrt",
        Op::Gelu(..) => "gelu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::ColSums(..) => "col_sums",
        Op::Row(..) => "row",
        Op::Reshape(..) => "reshape",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::Concat(..) => "concat",
        Op::Elem(..) => "elem",
        Op::DropElem(..) => "drop_elem",
        Op::LogSumExp(..) => "logsumexp",
        Op::BScale(..) => "bscale",
    }
}

// The map helpers build tensors unchecked; push() validates finiteness and
// turns NaN/Inf into a NonFinite error naming the op.
fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::from_raw(t.shape().to_vec(), data)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_raw(a.shape().to_vec(), data)
}

/// Row normalization used by layer_norm forward and backward: returns
/// (xhat, rstd) for one row.
fn ln_normalize(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mu: f64 = row.iter().sum::<f64>() / n;
    let var: f64 = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    (row.iter().map(|&x| (x - mu) * rstd).collect(), rstd)
}
