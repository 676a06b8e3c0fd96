//! Reverse-mode differentiation over a recorded forward pass.
//!
//! A [`Tape`] is an append-only list of primitive operations. Each node keeps
//! its output value plus whatever context its backward rule needs, so running
//! the rules in reverse order yields gradients for every leaf reachable from
//! the loss. Leaves that never feed the loss come back as zero gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GgzError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { requires_grad: bool },
    MatMul { a: usize, b: usize },
    /// `[B×O] + [O]` with the row broadcast over the batch.
    AddRow { a: usize, row: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `mul * x + add`, elementwise; only the slope matters going backward.
    AffineElem { x: usize, mul: f64 },
    Elu { x: usize },
    Gelu { x: usize },
    /// Saved per-element scale: 0 where dropped, 1/(1-rate) where kept.
    Dropout { x: usize, scale: Vec<f64> },
    /// Softmax over the last axis, one simplex per row.
    RowSoftmax { x: usize },
    /// Row gather; doubles as embedding lookup when `x` is a table leaf.
    GatherRows { x: usize, indices: Vec<usize> },
    ConcatCols { a: usize, b: usize },
    Reshape { x: usize },
    /// Stack `times` copies of a matrix vertically.
    TileRows { x: usize, times: usize },
    /// Forward: per-row argmax one-hot (ties to the lowest index).
    /// Backward: identity into the soft input.
    StraightThrough { soft: usize },
    /// Per-row sum over a fixed set of columns; output is one value per row.
    MaskCols { x: usize, cols: Vec<usize> },
    /// Scalar <w, x>; the constant weights live in the op.
    DotConst { x: usize, weights: Tensor },
    /// Per-segment max over one column; `argmax` saves the winning row ids.
    SegMaxCol { x: usize, col: usize, argmax: Vec<usize> },
    Clamp01 { x: usize },
    /// Scalar `bias + Σ coeff_i · term_i`; the bias has no gradient.
    LinComb { terms: Vec<(usize, f64)> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros if the var never reached the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        // Non-finite values are caught at the sinks (loss checks, gradient
        // finiteness in backward) so a poisoned batch aborts with context
        // instead of panicking mid-graph.
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
        )
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
        )
    }

    /// `input[B×I] · weight[I×O] + bias[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let prod = self.matmul(input, weight)?;
        self.add_row(prod, bias)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let at = self.value(a);
        let rt = self.value(row);
        if at.cols() != rt.numel() {
            return Err(GgzError::Dim(format!(
                "row broadcast: {:?} + {:?}",
                at.shape(),
                rt.shape()
            )));
        }
        let cols = at.cols();
        let mut data = at.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += rt.data()[i % cols];
        }
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { a: a.0, row: row.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let value = self.value(x).map(|v| mul * v + add);
        Ok(self.push(value, Op::AffineElem { x: x.0, mul }))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(elu);
        Ok(self.push(value, Op::Elu { x: x.0 }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        Ok(self.push(value, Op::Gelu { x: x.0 }))
    }

    /// Train-mode inverted dropout. `rate` must lie in `[0, 1)`; eval mode and
    /// rate 0 are the identity and record nothing.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GgzError::InvalidArg(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let xt = self.value(x);
        let data: Vec<f64> = xt.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x: x.0, scale }))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let cols = xt.cols();
        if cols == 0 {
            return Err(GgzError::Dim("softmax over empty rows".into()));
        }
        let mut data = Vec::with_capacity(xt.numel());
        for row in xt.data().chunks(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(value, Op::RowSoftmax { x: x.0 }))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let cols = xt.cols();
        let rows = xt.rows();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &idx in indices {
            if idx >= rows {
                return Err(GgzError::InvalidArg(format!(
                    "row index {idx} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&xt.data()[idx * cols..(idx + 1) * cols]);
        }
        let value = Tensor::matrix(indices.len(), cols, data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x: x.0,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let at = self.value(a);
        let bt = self.value(b);
        if at.rows() != bt.rows() {
            return Err(GgzError::Dim(format!(
                "concat_cols: {:?} vs {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let (rows, ac, bc) = (at.rows(), at.cols(), bt.cols());
        let mut data = Vec::with_capacity(rows * (ac + bc));
        for r in 0..rows {
            data.extend_from_slice(&at.data()[r * ac..(r + 1) * ac]);
            data.extend_from_slice(&bt.data()[r * bc..(r + 1) * bc]);
        }
        let value = Tensor::matrix(rows, ac + bc, data)?;
        Ok(self.push(value, Op::ConcatCols { a: a.0, b: b.0 }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }))
    }

    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(GgzError::InvalidArg("tile_rows with zero copies".into()));
        }
        let xt = self.value(x);
        let (rows, cols) = (xt.rows(), xt.cols());
        let mut data = Vec::with_capacity(times * rows * cols);
        for _ in 0..times {
            data.extend_from_slice(xt.data());
        }
        let value = Tensor::matrix(times * rows, cols, data)?;
        Ok(self.push(value, Op::TileRows { x: x.0, times }))
    }

    /// Hard forward / soft backward. Rows must already lie on the simplex.
    pub fn straight_through(&mut self, soft: Var) -> Result<Var> {
        let st = self.value(soft);
        let cols = st.cols();
        let mut data = vec![0.0; st.numel()];
        for (r, row) in st.data().chunks(cols).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < -1e-9) {
                return Err(GgzError::Contract(format!(
                    "straight_through row {r} is off the simplex (sum {sum})"
                )));
            }
            data[r * cols + argmax_lowest(row)] = 1.0;
        }
        let value = Tensor::new(st.shape().to_vec(), data)?;
        Ok(self.push(value, Op::StraightThrough { soft: soft.0 }))
    }

    /// Per-row sum over `cols`, producing one value per row.
    pub fn mask_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let ncols = xt.cols();
        if let Some(&bad) = cols.iter().find(|&&c| c >= ncols) {
            return Err(GgzError::InvalidArg(format!(
                "mask_cols column {bad} out of range for {ncols} columns"
            )));
        }
        let data: Vec<f64> = xt
            .data()
            .chunks(ncols)
            .map(|row| cols.iter().map(|&c| row[c]).sum())
            .collect();
        let value = Tensor::new(vec![xt.rows()], data)?;
        Ok(self.push(
            value,
            Op::MaskCols {
                x: x.0,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Scalar dot product against fixed weights.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xt = self.value(x);
        if xt.numel() != weights.numel() {
            return Err(GgzError::Dim(format!(
                "dot_const: {} values vs {} weights",
                xt.numel(),
                weights.numel()
            )));
        }
        let v: f64 = xt
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &w)| a * w)
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::DotConst { x: x.0, weights }))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let w = Tensor::full(&[self.value(x).numel()], 1.0);
        self.dot_const(x, w)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let w = Tensor::full(&[n], 1.0 / n as f64);
        self.dot_const(x, w)
    }

    /// For each consecutive segment of `seg_len` rows, the max of column `col`.
    pub fn seg_max_col(&mut self, x: Var, seg_len: usize, col: usize) -> Result<Var> {
        let xt = self.value(x);
        let (rows, ncols) = (xt.rows(), xt.cols());
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(GgzError::Dim(format!(
                "seg_max_col: {rows} rows not divisible into segments of {seg_len}"
            )));
        }
        if col >= ncols {
            return Err(GgzError::InvalidArg(format!(
                "seg_max_col column {col} out of range for {ncols} columns"
            )));
        }
        let nseg = rows / seg_len;
        let mut out = Vec::with_capacity(nseg);
        let mut argmax = Vec::with_capacity(nseg);
        for s in 0..nseg {
            let mut best = f64::NEG_INFINITY;
            let mut best_row = s * seg_len;
            for r in s * seg_len..(s + 1) * seg_len {
                let v = xt.data()[r * ncols + col];
                if v > best {
                    best = v;
                    best_row = r;
                }
            }
            out.push(best);
            argmax.push(best_row);
        }
        let value = Tensor::new(vec![nseg], out)?;
        Ok(self.push(
            value,
            Op::SegMaxCol {
                x: x.0,
                col,
                argmax,
            },
        ))
    }

    pub fn clamp01(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(0.0, 1.0));
        Ok(self.push(value, Op::Clamp01 { x: x.0 }))
    }

    /// Scalar `bias + Σ coeff·term`; every term must be scalar.
    pub fn lincomb(&mut self, terms: &[(Var, f64)], bias: f64) -> Result<Var> {
        let mut v = bias;
        for &(var, coeff) in terms {
            v += coeff * self.value(var).scalar_value()?;
        }
        Ok(self.push(
            Tensor::scalar(v),
            Op::LinComb {
                terms: terms.iter().map(|&(var, c)| (var.0, c)).collect(),
            },
        ))
    }

    /// Run every backward rule in reverse order from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(GgzError::InvalidArg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let grad_out = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &grad_out, &mut grads)?;
            // Leaves keep their gradient; interior grads are dropped once used.
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                grads[i] = Some(grad_out);
            }
        }

        // Params never touched by the loss get explicit zeros from `get`.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                requires_grad: false,
            } = node.op
            {
                grads[i] = None;
            }
            if let Some(g) = &grads[i] {
                g.assert_finite("gradient")?;
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn apply_backward(
        &self,
        i: usize,
        grad_out: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val_of = |id: usize| &self.nodes[id].value;
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let ga = grad_out.matmul_bt(val_of(*b))?;
                let gb = val_of(*a).matmul_at(grad_out)?;
                acc(grads, *a, ga.reshaped(val_of(*a).shape().to_vec())?)?;
                acc(grads, *b, gb.reshaped(val_of(*b).shape().to_vec())?)?;
            }
            Op::AddRow { a, row } => {
                acc(grads, *a, grad_out.clone())?;
                let cols = val_of(*row).numel();
                let mut gr = vec![0.0; cols];
                for (idx, &g) in grad_out.data().iter().enumerate() {
                    gr[idx % cols] += g;
                }
                acc(grads, *row, Tensor::new(val_of(*row).shape().to_vec(), gr)?)?;
            }
            Op::Add { a, b } => {
                acc(grads, *a, grad_out.clone())?;
                acc(grads, *b, grad_out.clone())?;
            }
            Op::Sub { a, b } => {
                acc(grads, *a, grad_out.clone())?;
                acc(grads, *b, grad_out.map(|g| -g))?;
            }
            Op::Mul { a, b } => {
                acc(grads, *a, grad_out.zip(val_of(*b), |g, v| g * v)?)?;
                acc(grads, *b, grad_out.zip(val_of(*a), |g, v| g * v)?)?;
            }
            Op::AffineElem { x, mul } => {
                let m = *mul;
                acc(grads, *x, grad_out.map(|g| g * m))?;
            }
            Op::Elu { x } => {
                acc(grads, *x, grad_out.zip(val_of(*x), |g, v| g * elu_deriv(v))?)?;
            }
            Op::Gelu { x } => {
                acc(
                    grads,
                    *x,
                    grad_out.zip(val_of(*x), |g, v| g * gelu_deriv(v))?,
                )?;
            }
            Op::Dropout { x, scale } => {
                let data: Vec<f64> = grad_out
                    .data()
                    .iter()
                    .zip(scale)
                    .map(|(&g, &s)| g * s)
                    .collect();
                acc(grads, *x, Tensor::new(grad_out.shape().to_vec(), data)?)?;
            }
            Op::RowSoftmax { x } => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for (yrow, grow) in y.data().chunks(cols).zip(grad_out.data().chunks(cols)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    data.extend(yrow.iter().zip(grow).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                acc(grads, *x, Tensor::new(y.shape().to_vec(), data)?)?;
            }
            Op::GatherRows { x, indices } => {
                let xt = val_of(*x);
                let cols = xt.cols();
                let mut gx = vec![0.0; xt.numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    for c in 0..cols {
                        gx[idx * cols + c] += grad_out.data()[r * cols + c];
                    }
                }
                acc(grads, *x, Tensor::new(xt.shape().to_vec(), gx)?)?;
            }
            Op::ConcatCols { a, b } => {
                let (ac, bc) = (val_of(*a).cols(), val_of(*b).cols());
                let rows = val_of(*a).rows();
                let mut ga = Vec::with_capacity(rows * ac);
                let mut gb = Vec::with_capacity(rows * bc);
                for r in 0..rows {
                    let row = &grad_out.data()[r * (ac + bc)..(r + 1) * (ac + bc)];
                    ga.extend_from_slice(&row[..ac]);
                    gb.extend_from_slice(&row[ac..]);
                }
                acc(grads, *a, Tensor::new(val_of(*a).shape().to_vec(), ga)?)?;
                acc(grads, *b, Tensor::new(val_of(*b).shape().to_vec(), gb)?)?;
            }
            Op::Reshape { x } => {
                acc(grads, *x, grad_out.reshaped(val_of(*x).shape().to_vec())?)?;
            }
            Op::TileRows { x, times } => {
                let xt = val_of(*x);
                let n = xt.numel();
                let mut gx = vec![0.0; n];
                for t in 0..*times {
                    for (j, g) in gx.iter_mut().enumerate() {
                        *g += grad_out.data()[t * n + j];
                    }
                }
                acc(grads, *x, Tensor::new(xt.shape().to_vec(), gx)?)?;
            }
            Op::StraightThrough { soft } => {
                acc(grads, *soft, grad_out.reshaped(val_of(*soft).shape().to_vec())?)?;
            }
            Op::MaskCols { x, cols } => {
                let xt = val_of(*x);
                let ncols = xt.cols();
                let mut gx = vec![0.0; xt.numel()];
                for (r, &g) in grad_out.data().iter().enumerate() {
                    for &c in cols {
                        gx[r * ncols + c] += g;
                    }
                }
                acc(grads, *x, Tensor::new(xt.shape().to_vec(), gx)?)?;
            }
            Op::DotConst { x, weights } => {
                let g = grad_out.data()[0];
                acc(grads, *x, weights.map(|w| w * g).reshaped(val_of(*x).shape().to_vec())?)?;
            }
            Op::SegMaxCol { x, col, argmax } => {
                let xt = val_of(*x);
                let ncols = xt.cols();
                let mut gx = vec![0.0; xt.numel()];
                for (s, &row) in argmax.iter().enumerate() {
                    gx[row * ncols + col] += grad_out.data()[s];
                }
                acc(grads, *x, Tensor::new(xt.shape().to_vec(), gx)?)?;
            }
            Op::Clamp01 { x } => {
                acc(
                    grads,
                    *x,
                    grad_out.zip(val_of(*x), |g, v| {
                        if (0.0..=1.0).contains(&v) {
                            g
                        } else {
                            0.0
                        }
                    })?,
                )?;
            }
            Op::LinComb { terms } => {
                let g = grad_out.data()[0];
                for &(t, coeff) in terms {
                    acc(grads, t, Tensor::scalar(g * coeff))?;
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], id: usize, add: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(g) => g.add_assign(&add)?,
        slot @ None => *slot = Some(add),
    }
    Ok(())
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub(crate) fn elu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
