//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as a node in creation order, which is
//! already a topological order; [`Tape::backward`] walks it once in reverse.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Minimum row norm accepted by [`Tape::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    RepeatEachRow(Var, usize),
    TileRows(Var, usize),
    L2NormalizeRows(Var, Vec<f64>),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Diag(Var),
    PairMlp(PairMlpInputs),
}

#[derive(Debug, Clone, Copy)]
struct PairMlpInputs {
    pair: Var,
    w_pair: Var,
    caption: Var,
    gallery: Option<Var>,
    bias: Var,
    w_out: Var,
    gallery_len: usize,
}

impl PairMlpInputs {
    fn vars(&self) -> impl Iterator<Item = Var> {
        [Some(self.pair), Some(self.w_pair), Some(self.caption), self.gallery, Some(self.bias), Some(self.w_out)]
            .into_iter()
            .flatten()
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the output with respect to `var`; `None` if it does not
    /// depend on a differentiable path.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient, or zeros of the given shape when absent.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::ConcatCols(parts) => parts.iter().any(|p| self.nodes[p.0].requires_grad),
            Op::PairMlp(inputs) => inputs.vars().any(|v| self.nodes[v.0].requires_grad),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a, _)
            | Op::LogSoftmaxRows(a, _)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::SelectRows(a, _)
            | Op::Reshape(a)
            | Op::RepeatEachRow(a, _)
            | Op::TileRows(a, _)
            | Op::L2NormalizeRows(a, _)
            | Op::SumRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Diag(a) => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: av.shape(),
                right: rv.shape(),
            });
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let value = softmax_rows(self.value(a), temperature);
        Ok(self.push(value, Op::SoftmaxRows(a, temperature)))
    }

    /// Row-wise log-softmax of `a / temperature`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let src = self.value(a);
        let mut value = src.clone();
        for i in 0..value.rows() {
            let lse = log_sum_exp(src.row(i), temperature);
            for x in value.row_mut(i) {
                *x = *x / temperature - lse;
            }
        }
        Ok(self.push(value, Op::LogSoftmaxRows(a, temperature)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape(),
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for p in parts {
                let src = self.value(*p).row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, end)?;
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Row `i·times + r` of the result is row `i` of `a`.
    pub fn repeat_each_row(&mut self, a: Var, times: usize) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(src.rows() * times * src.cols());
        for i in 0..src.rows() {
            for _ in 0..times {
                data.extend_from_slice(src.row(i));
            }
        }
        let value = Matrix::new(src.rows() * times, src.cols(), data).expect("sized above");
        self.push(value, Op::RepeatEachRow(a, times))
    }

    /// Row `r·rows(a) + i` of the result is row `i` of `a`.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(src.rows() * times * src.cols());
        for _ in 0..times {
            data.extend_from_slice(src.data());
        }
        let value = Matrix::new(src.rows() * times, src.cols(), data).expect("sized above");
        self.push(value, Op::TileRows(a, times))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let mut norms = Vec::with_capacity(src.rows());
        let mut value = src.clone();
        for i in 0..src.rows() {
            let norm = dot(src.row(i), src.row(i)).sqrt();
            if norm <= NORM_EPS {
                return Err(Error::Degenerate {
                    op: "l2_normalize_rows",
                    row: i,
                });
            }
            for x in value.row_mut(i) {
                *x /= norm;
            }
            norms.push(norm);
        }
        Ok(self.push(value, Op::L2NormalizeRows(a, norms)))
    }

    /// `rows×1` column of row sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Matrix::from_fn(src.rows(), 1, |i, _| src.row(i).iter().sum());
        self.push(value, Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.data().len().max(1) as f64;
        let value = Matrix::scalar(src.sum() / n);
        self.push(value, Op::Mean(a))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.rows() != src.cols() {
            return Err(Error::Dimension {
                op: "diag",
                left: src.shape(),
                right: (src.cols(), src.rows()),
            });
        }
        let value = Matrix::from_fn(src.rows(), 1, |i, _| src.get(i, i));
        Ok(self.push(value, Op::Diag(a)))
    }

    /// Reverse pass from a `1×1` output.
    /// One-hidden-layer relu head over caption × gallery pairs.
    ///
    /// With `g = rows(pair) / rows(caption)`, output row `p = i·g + j` is
    /// `Σ_h w_out[h] · relu(pair_p · w_pair[h] + caption[i,h] + gallery[j,h] + bias[h])`.
    /// `w_pair` is `H×m`, `caption` is `q×H`, `gallery` is `g×H`, `bias` and
    /// `w_out` are `1×H`. The hidden layer is never materialized.
    pub fn pair_mlp(
        &mut self,
        pair: Var,
        w_pair: Var,
        caption: Var,
        gallery: Option<Var>,
        bias: Var,
        w_out: Var,
    ) -> Result<Var> {
        let (rows, m) = self.shape(pair);
        let (hidden, wm) = self.shape(w_pair);
        let (q, ch) = self.shape(caption);
        let mismatch = |left, right| Error::Dimension { op: "pair_mlp", left, right };
        if wm != m {
            return Err(mismatch((rows, m), (hidden, wm)));
        }
        if ch != hidden || q == 0 || rows % q != 0 {
            return Err(mismatch((rows, m), (q, ch)));
        }
        let g = rows / q;
        for v in [bias, w_out] {
            if self.shape(v) != (1, hidden) {
                return Err(mismatch(self.shape(v), (1, hidden)));
            }
        }
        if let Some(v) = gallery {
            if self.shape(v) != (g, hidden) {
                return Err(mismatch(self.shape(v), (g, hidden)));
            }
        }
        let inputs = PairMlpInputs {
            pair,
            w_pair,
            caption,
            gallery,
            bias,
            w_out,
            gallery_len: g,
        };
        let w_t = self.value(w_pair).transpose();
        let mut pre = vec![0.0; hidden];
        let mut out = Vec::with_capacity(rows);
        for p in 0..rows {
            self.pair_mlp_hidden(&inputs, &w_t, p, &mut pre);
            out.push(dot(&pre, self.value(w_out).data()));
        }
        let value = Matrix::new(rows, 1, out)?;
        Ok(self.push(value, Op::PairMlp(inputs)))
    }

    /// Post-relu hidden activations of pair row `p`; `w_t` is `w_pairᵀ`.
    fn pair_mlp_hidden(&self, inputs: &PairMlpInputs, w_t: &Matrix, p: usize, out: &mut [f64]) {
        let (i, j) = (p / inputs.gallery_len, p % inputs.gallery_len);
        let caption = self.value(inputs.caption).row(i);
        let bias = self.value(inputs.bias).data();
        for ((o, c), b) in out.iter_mut().zip(caption).zip(bias) {
            *o = c + b;
        }
        if let Some(gallery) = inputs.gallery {
            axpy(out, 1.0, self.value(gallery).row(j));
        }
        for (c, &x) in self.value(inputs.pair).row(p).iter().enumerate() {
            axpy(out, x, w_t.row(c));
        }
        for o in out.iter_mut() {
            *o = o.max(0.0);
        }
    }

    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                left: out_shape,
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, delta: Matrix) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul_transposed(bv)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, av.transposed_matmul(g)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?)?;
                self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?)?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                let mut col_sums = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (s, x) in col_sums.data_mut().iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                self.accumulate(grads, *row, col_sums)?;
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g.scale(*factor))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Relu(a) => {
                let delta = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 })?;
                self.accumulate(grads, *a, delta)?;
            }
            Op::Sigmoid(a) => {
                let delta = g.zip_map(out, |x, s| x * s * (1.0 - s))?;
                self.accumulate(grads, *a, delta)?;
            }
            Op::SoftmaxRows(a, temperature) => {
                let mut delta = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (p, gi) = (out.row(i), g.row(i));
                    let inner = dot(p, gi);
                    for ((d, &pj), &gj) in delta.row_mut(i).iter_mut().zip(p).zip(gi) {
                        *d = pj * (gj - inner) / temperature;
                    }
                }
                self.accumulate(grads, *a, delta)?;
            }
            Op::LogSoftmaxRows(a, temperature) => {
                let mut delta = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let gi = g.row(i);
                    let total: f64 = gi.iter().sum();
                    for ((d, &lp), &gj) in delta.row_mut(i).iter_mut().zip(out.row(i)).zip(gi) {
                        *d = (gj - lp.exp() * total) / temperature;
                    }
                }
                self.accumulate(grads, *a, delta)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).cols();
                    self.accumulate(grads, *p, g.slice_cols(offset, offset + width)?)?;
                    offset += width;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut delta = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    delta.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, delta)?;
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut delta = Matrix::zeros(rows, cols);
                delta.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                self.accumulate(grads, *a, delta)?;
            }
            Op::SelectRows(a, indices) => {
                let (rows, cols) = self.shape(*a);
                let mut delta = Matrix::zeros(rows, cols);
                for (r, &src) in indices.iter().enumerate() {
                    for (d, x) in delta.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, delta)?;
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, g.reshape(rows, cols)?)?;
            }
            Op::RepeatEachRow(a, times) => {
                let (rows, cols) = self.shape(*a);
                let mut delta = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    for r in 0..*times {
                        for (d, x) in delta.row_mut(i).iter_mut().zip(g.row(i * times + r)) {
                            *d += x;
                        }
                    }
                }
                self.accumulate(grads, *a, delta)?;
            }
            Op::TileRows(a, times) => {
                let (rows, cols) = self.shape(*a);
                let mut delta = Matrix::zeros(rows, cols);
                for r in 0..*times {
                    for i in 0..rows {
                        for (d, x) in delta.row_mut(i).iter_mut().zip(g.row(r * rows + i)) {
                            *d += x;
                        }
                    }
                }
                self.accumulate(grads, *a, delta)?;
            }
            Op::L2NormalizeRows(a, norms) => {
                // d(x/|x|) = (g - y (y·g)) / |x|
                let mut delta = Matrix::zeros(g.rows(), g.cols());
                for (i, norm) in norms.iter().enumerate() {
                    let (y, gi) = (out.row(i), g.row(i));
                    let proj = dot(y, gi);
                    for ((d, &yj), &gj) in delta.row_mut(i).iter_mut().zip(y).zip(gi) {
                        *d = (gj - yj * proj) / norm;
                    }
                }
                self.accumulate(grads, *a, delta)?;
            }
            Op::SumRows(a) => {
                let (rows, cols) = self.shape(*a);
                let delta = Matrix::from_fn(rows, cols, |i, _| g.get(i, 0));
                self.accumulate(grads, *a, delta)?;
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(rows, cols, g.item()))?;
            }
            Op::Mean(a) => {
                let (rows, cols) = self.shape(*a);
                let n = (rows * cols).max(1) as f64;
                self.accumulate(grads, *a, Matrix::filled(rows, cols, g.item() / n))?;
            }
            Op::PairMlp(inputs) => {
                let (rows, m) = self.shape(inputs.pair);
                let hidden = self.shape(inputs.w_pair).0;
                let (q, g_len) = (self.shape(inputs.caption).0, inputs.gallery_len);
                let w_t = self.value(inputs.w_pair).transpose();
                let w_out = self.value(inputs.w_out).data();
                let mut d_pair = Matrix::zeros(rows, m);
                let mut d_w_t = Matrix::zeros(m, hidden);
                let mut d_caption = Matrix::zeros(q, hidden);
                let mut d_gallery = Matrix::zeros(g_len, hidden);
                let mut d_bias = vec![0.0; hidden];
                let mut d_out = vec![0.0; hidden];
                let mut act = vec![0.0; hidden];
                let mut d_pre = vec![0.0; hidden];
                for p in 0..rows {
                    let gp = g.get(p, 0);
                    if gp == 0.0 {
                        continue;
                    }
                    self.pair_mlp_hidden(inputs, &w_t, p, &mut act);
                    axpy(&mut d_out, gp, &act);
                    for ((d, &a), &w) in d_pre.iter_mut().zip(&act).zip(w_out) {
                        *d = if a > 0.0 { gp * w } else { 0.0 };
                    }
                    let (i, j) = (p / g_len, p % g_len);
                    axpy(d_caption.row_mut(i), 1.0, &d_pre);
                    axpy(d_gallery.row_mut(j), 1.0, &d_pre);
                    axpy(&mut d_bias, 1.0, &d_pre);
                    let x = self.value(inputs.pair).row(p);
                    for (c, &xc) in x.iter().enumerate().take(m) {
                        d_pair.set(p, c, dot(&d_pre, w_t.row(c)));
                        axpy(d_w_t.row_mut(c), xc, &d_pre);
                    }
                }
                self.accumulate(grads, inputs.pair, d_pair)?;
                self.accumulate(grads, inputs.w_pair, d_w_t.transpose())?;
                self.accumulate(grads, inputs.caption, d_caption)?;
                if let Some(gallery) = inputs.gallery {
                    self.accumulate(grads, gallery, d_gallery)?;
                }
                self.accumulate(grads, inputs.bias, Matrix::row_vector(&d_bias))?;
                self.accumulate(grads, inputs.w_out, Matrix::row_vector(&d_out))?;
            }
            Op::Diag(a) => {
                let (rows, cols) = self.shape(*a);
                let mut delta = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    delta.set(i, i, g.get(i, 0));
                }
                self.accumulate(grads, *a, delta)?;
            }
        }
        Ok(())
    }
}

/// `y += a·x`.
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

/// `log Σ exp(x / temperature)` with max subtraction.
pub fn log_sum_exp(row: &[f64], temperature: f64) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row
        .iter()
        .map(|&x| (x / temperature - max).exp())
        .sum::<f64>()
        .ln()
}

/// Row-wise softmax of `x / temperature` on a plain matrix.
pub fn softmax_rows(x: &Matrix, temperature: f64) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v / temperature - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
