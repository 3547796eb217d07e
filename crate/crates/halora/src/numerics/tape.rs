//! Reverse-mode differentiation on a Wengert tape.
//!
//! Ops are recorded in execution order into an arena; [`Tape::backward`]
//! replays them in reverse, accumulating adjoints additively so fan-out
//! (one value feeding several ops) just works. Every value is a [`Matrix`];
//! scalars are 1x1 matrices.
//!
//! The op set is exactly what the models in this crate need — linear layers,
//! attention, layer norm, pooling, losses — not a general tensor library.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Numerical floor added to the layer-norm variance before the square root.
const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    /// Input, parameter, or constant: no backward rule.
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    /// `a` (R x C) plus `row` (1 x C) broadcast over every row of `a`.
    AddRow { a: Var, row: Var },
    Relu { a: Var },
    /// Softmax across each row independently.
    RowSoftmax { a: Var },
    /// Row-wise layer norm with learned 1 x C gain and bias.
    /// `x_hat` and `inv_std` are cached forward values used by backward.
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        x_hat: Matrix,
        inv_std: Vec<f64>,
    },
    /// Gather rows of `table` by index; duplicates accumulate in backward.
    EmbedRows { table: Var, ids: Vec<usize> },
    /// Mean over rows: R x C -> 1 x C.
    MeanRows { a: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    /// Column slice of `a` starting at `c0` (extent lives in the node value).
    SliceCols { a: Var, c0: usize },
    /// Frobenius norm as a 1x1 scalar; gradient at the zero matrix is zero.
    FrobNorm { a: Var },
    /// Mean negative log-likelihood after row-wise softmax.
    /// `probs` is the cached softmax used by backward.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Arena of recorded operations plus their forward values.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradient out (avoids a clone in optimizer hot paths).
    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input/parameter/constant value.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Forward value of `v`.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Forward values of every recorded node, in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Matrix> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Forward value of a 1x1 variable as an `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1), "scalar() on a non-1x1 variable");
        m.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose { a }, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub { a, b }, value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(Op::Scale { a, c }, value)
    }

    /// Broadcast-adds a 1 x C `row` onto every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != ac {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: (ar, ac),
                right: (rr, rc),
            });
        }
        let mut value = self.value(a).clone();
        let rowv = self.value(row).data().to_vec();
        for i in 0..ar {
            for j in 0..ac {
                let v = value.get(i, j) + rowv[j];
                value.set(i, j, v);
            }
        }
        Ok(self.push(Op::AddRow { a, row }, value))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu { a }, value)
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(Op::RowSoftmax { a }, value)
    }

    /// Row-wise layer norm: each row of `x` is standardized (population
    /// variance, epsilon-stabilized), then scaled by `gain` and shifted by
    /// `bias` (both 1 x C).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).shape();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let shape = self.value(v).shape();
            if shape != (1, c) {
                return Err(Error::ShapeMismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    left: (r, c),
                    right: shape,
                });
            }
        }
        let xm = self.value(x);
        let gainv = self.value(gain).data().to_vec();
        let biasv = self.value(bias).data().to_vec();
        let mut x_hat = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                x_hat.set(i, j, xh);
                out.set(i, j, gainv[j] * xh + biasv[j]);
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            },
            out,
        ))
    }

    /// Gathers `table` rows by index into an `ids.len() x cols` matrix.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).shape();
        let mut out = Matrix::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::InvalidArgument(format!(
                    "embed index {id} at position {i} out of range for a table of {rows} rows"
                )));
            }
            let src = self.value(table).row(id).to_vec();
            out.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(&src);
        }
        Ok(self.push(
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            out,
        ))
    }

    /// Mean over rows: R x C -> 1 x C.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        let mut out = Matrix::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                let v = out.get(0, j) + self.value(a).get(i, j);
                out.set(0, j, v);
            }
        }
        if r > 0 {
            for v in out.data_mut() {
                *v /= r as f64;
            }
        }
        self.push(Op::MeanRows { a }, out)
    }

    /// Vertical stack; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of zero parts".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let shape = self.value(p).shape();
            if shape.1 != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: shape,
                });
            }
            rows += shape.0;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut r0 = 0;
        for &p in parts {
            let m = self.value(p).clone();
            out.set_block(r0, 0, &m)?;
            r0 += m.rows();
        }
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Horizontal stack; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let shape = self.value(p).shape();
            if shape.0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: shape,
                });
            }
            cols += shape.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let m = self.value(p).clone();
            out.set_block(0, c0, &m)?;
            c0 += m.cols();
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Columns `c0 .. c0 + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, c0: usize, width: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if c0 + width > c {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {c0}..{} exceeds {c} columns",
                c0 + width
            )));
        }
        let value = self.value(a).block(0, c0, r, width)?;
        Ok(self.push(Op::SliceCols { a, c0 }, value))
    }

    /// Frobenius norm as a 1x1 scalar.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).frobenius_norm();
        let value = Matrix::from_vec(1, 1, vec![n]).expect("1x1");
        self.push(Op::FrobNorm { a }, value)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, stabilized by row-max subtraction. Returns a 1x1 scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).shape();
        if labels.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {rows} logit rows",
                labels.len()
            )));
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    classes,
                });
            }
        }
        let probs = softmax_rows(self.value(logits));
        let mut nll = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            // ln softmax recomputed in stabilized form for accuracy.
            let row = self.value(logits).row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            nll += lse - row[label];
        }
        nll /= rows as f64;
        let value = Matrix::from_vec(1, 1, vec![nll]).expect("1x1");
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        ))
    }

    /// Reverse pass from a scalar `loss`, accumulating adjoints for every
    /// variable that influenced it.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            let shape = self.value(loss).shape();
            return Err(Error::InvalidArgument(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).expect("1x1"));

        for idx in (0..=loss.0).rev() {
            let Some(d_out) = grads[idx].take() else {
                continue;
            };
            self.backward_op(idx, &d_out, &mut grads)?;
            grads[idx] = Some(d_out);
        }
        Ok(Grads { grads })
    }

    fn backward_op(&self, idx: usize, d_out: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let da = d_out.matmul(&self.value(*b).transpose())?;
                let db = self.value(*a).transpose().matmul(d_out)?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Transpose { a } => {
                accumulate(grads, *a, d_out.transpose())?;
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, d_out.clone())?;
                accumulate(grads, *b, d_out.clone())?;
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, d_out.clone())?;
                accumulate(grads, *b, d_out.scale(-1.0))?;
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, d_out.scale(*c))?;
            }
            Op::AddRow { a, row } => {
                accumulate(grads, *a, d_out.clone())?;
                let (r, c) = d_out.shape();
                let mut drow = Matrix::zeros(1, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = drow.get(0, j) + d_out.get(i, j);
                        drow.set(0, j, v);
                    }
                }
                accumulate(grads, *row, drow)?;
            }
            Op::Relu { a } => {
                let mut da = d_out.clone();
                let input = self.value(*a);
                for (g, &x) in da.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                accumulate(grads, *a, da)?;
            }
            Op::RowSoftmax { a } => {
                // For each row: da = p .* (dy - <dy, p>).
                let p = &self.nodes[idx].value;
                let (r, c) = p.shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| d_out.get(i, j) * p.get(i, j)).sum();
                    for j in 0..c {
                        da.set(i, j, p.get(i, j) * (d_out.get(i, j) - dot));
                    }
                }
                accumulate(grads, *a, da)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            } => {
                let (r, c) = x_hat.shape();
                let gainv = self.value(*gain);
                let mut dx = Matrix::zeros(r, c);
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                for i in 0..r {
                    // dxh = dy .* gain; then the standard whitening backward:
                    // dx = inv_std * (dxh - mean(dxh) - x_hat * mean(dxh .* x_hat)).
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..c {
                        let dxh = d_out.get(i, j) * gainv.get(0, j);
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * x_hat.get(i, j);
                    }
                    mean_dxh /= c as f64;
                    mean_dxh_xh /= c as f64;
                    for j in 0..c {
                        let dxh = d_out.get(i, j) * gainv.get(0, j);
                        dx.set(
                            i,
                            j,
                            inv_std[i] * (dxh - mean_dxh - x_hat.get(i, j) * mean_dxh_xh),
                        );
                        let gj = dgain.get(0, j) + d_out.get(i, j) * x_hat.get(i, j);
                        dgain.set(0, j, gj);
                        let bj = dbias.get(0, j) + d_out.get(i, j);
                        dbias.set(0, j, bj);
                    }
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gain, dgain)?;
                accumulate(grads, *bias, dbias)?;
            }
            Op::EmbedRows { table, ids } => {
                let (rows, cols) = self.value(*table).shape();
                let mut dt = Matrix::zeros(rows, cols);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        let v = dt.get(id, j) + d_out.get(i, j);
                        dt.set(id, j, v);
                    }
                }
                accumulate(grads, *table, dt)?;
            }
            Op::MeanRows { a } => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                let w = 1.0 / r as f64;
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, w * d_out.get(0, j));
                    }
                }
                accumulate(grads, *a, da)?;
            }
            Op::ConcatRows { parts } => {
                let mut r0 = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).shape();
                    accumulate(grads, p, d_out.block(r0, 0, pr, pc)?)?;
                    r0 += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let mut c0 = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).shape();
                    accumulate(grads, p, d_out.block(0, c0, pr, pc)?)?;
                    c0 += pc;
                }
            }
            Op::SliceCols { a, c0 } => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                da.set_block(0, *c0, d_out)?;
                accumulate(grads, *a, da)?;
            }
            Op::FrobNorm { a } => {
                let norm = self.nodes[idx].value.data()[0];
                // Subgradient 0 at the zero matrix keeps B=0 inits trainable.
                let da = if norm > 0.0 {
                    self.value(*a).scale(d_out.data()[0] / norm)
                } else {
                    Matrix::zeros(self.value(*a).rows(), self.value(*a).cols())
                };
                accumulate(grads, *a, da)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (r, c) = probs.shape();
                let scale = d_out.data()[0] / r as f64;
                let mut dl = probs.scale(scale);
                for (i, &label) in labels.iter().enumerate() {
                    let v = dl.get(i, label) - scale;
                    dl.set(i, label, v);
                }
                let _ = c;
                accumulate(grads, *logits, dl)?;
            }
        }
        Ok(())
    }
}

/// Adds `delta` into the adjoint slot for `v`.
fn accumulate(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(g) => g.axpy(1.0, &delta)?,
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(m: &Matrix) -> Matrix {
    let (r, c) = m.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        let row = m.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..c {
            let v = out.get(i, j) / sum;
            out.set(i, j, v);
        }
    }
    out
}
