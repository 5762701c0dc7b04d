//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every operation appends one node holding its forward value and the
//! operand handles its backward rule needs. Nodes only ever reference earlier
//! nodes, so the tape is topologically sorted by construction and a single
//! reverse sweep visits each node once. Gradients of shared operands are
//! accumulated, never overwritten.

use std::fmt;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major matrix of integer indices (top-k selections).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<usize>,
}

impl IndexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<usize>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "index matrix {rows}x{cols} given {} entries",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<usize>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

/// Backward rule of a user-supplied operation: given operand values, the
/// forward output and the output gradient, return one gradient per operand.
pub type CustomBackward<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Affine(Var, T),
    AddRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    RowSoftmax(Var),
    TopK(Var, IndexMatrix),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    RowSum(Var),
    GroupSumRows(Var, usize),
    Transpose(Var),
    Reshape(Var),
    CrossEntropy(Var, usize, Vec<T>),
    Mask(Var, Vec<T>),
    Sum(Var),
    Custom(Vec<Var>, CustomBackward<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_owned() })
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

/// Column indices of `row` ordered by descending value, ties by ascending index.
pub(crate) fn descending_order<T: Real>(row: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        check_finite(name, &value)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::MulColBroadcast(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Affine(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::RowSoftmax(a)
            | Op::TopK(a, _)
            | Op::GatherRows(a, _)
            | Op::MeanRows(a)
            | Op::MaxRows(a, _)
            | Op::RowSum(a)
            | Op::GroupSumRows(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::CrossEntropy(a, _, _)
            | Op::Mask(a, _)
            | Op::Sum(a) => self.requires_grad(*a),
            Op::ConcatRows(vs) | Op::Custom(vs, _) => vs.iter().any(|v| self.requires_grad(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("hadamard", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push("hadamard", out, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.affine(a, s, T::zero())
    }

    /// `s·a + c`, elementwise.
    pub fn affine(&mut self, a: Var, s: T, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| s * v + c);
        self.push("affine", out, Op::Affine(a, s))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.numel() != n {
            return Err(Error::dim(format!(
                "row bias has {} entries for {n} columns",
                b.numel()
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            data.extend(xv.row(r).iter().zip(b.data()).map(|(&p, &q)| p + q));
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("add_row_broadcast", out, Op::AddRowBroadcast(x, bias))
    }

    /// Scales row `i` of an `m×n` matrix by entry `i` of a length-`m` column.
    pub fn mul_col_broadcast(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let c = self.value(col);
        if c.numel() != m {
            return Err(Error::dim(format!(
                "column factor has {} entries for {m} rows",
                c.numel()
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let f = c.data()[r];
            data.extend(xv.row(r).iter().map(|&p| p * f));
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("mul_col_broadcast", out, Op::MulColBroadcast(x, col))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::tanh_kernel);
        self.push("tanh", out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(Error::param(format!(
                "leaky_relu slope must lie in (0,1), got {slope}"
            )));
        }
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope))
    }

    /// Softmax of every row, computed after subtracting the row maximum.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = xv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - max).exp()));
            let z: T = data[start..].iter().copied().sum();
            for v in &mut data[start..] {
                *v = *v / z;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        self.push("row_softmax", out, Op::RowSoftmax(x))
    }

    /// The `k` largest entries of each row in descending order (ties to the
    /// lower column). Gradients reach only the selected positions.
    pub fn topk_rows(&mut self, x: Var, k: usize) -> Result<(Var, IndexMatrix)> {
        self.topk_rows_masked(x, k, false)
    }

    /// [`Tape::topk_rows`] that optionally never selects column `r` in row
    /// `r`, for square score matrices where self-pairs are excluded.
    pub fn topk_rows_masked(
        &mut self,
        x: Var,
        k: usize,
        skip_diagonal: bool,
    ) -> Result<(Var, IndexMatrix)> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let avail = if skip_diagonal { n.saturating_sub(1) } else { n };
        if k == 0 || k > avail {
            return Err(Error::param(format!(
                "top-k needs 1 <= k <= {avail}, got {k}"
            )));
        }
        let mut idx = Vec::with_capacity(m * k);
        let mut vals = Vec::with_capacity(m * k);
        for r in 0..m {
            let row = xv.row(r);
            let order = descending_order(row);
            let chosen = order.iter().filter(|&&c| !(skip_diagonal && c == r)).take(k);
            for &c in chosen {
                idx.push(c);
                vals.push(row[c]);
            }
        }
        let idx = IndexMatrix::new(m, k, idx)?;
        let out = Tensor::new(&[m, k], vals)?;
        let v = self.push("topk_rows", out, Op::TopK(x, idx.clone()))?;
        Ok((v, idx))
    }

    /// Row `r` of the output is row `indices[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::param(format!("gather index {i} out of {m} rows")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[indices.len(), n], data)?;
        self.push("gather_rows", out, Op::GatherRows(x, indices.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let n = self.value(*first).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return Err(Error::dim(format!("concat_rows: {c} columns vs {n}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, n], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Column means of an `m×n` matrix as a `1×n` row.
    pub fn reduce_mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if m == 0 {
            return Err(Error::dim("mean over zero rows"));
        }
        let mut acc = vec![T::zero(); n];
        for r in 0..m {
            for (a, &v) in acc.iter_mut().zip(xv.row(r)) {
                *a = *a + v;
            }
        }
        let inv = T::one() / T::from_usize(m).expect("row count");
        acc.iter_mut().for_each(|a| *a = *a * inv);
        let out = Tensor::new(&[1, n], acc)?;
        self.push("reduce_mean_rows", out, Op::MeanRows(x))
    }

    /// Column maxima as a `1×n` row; the gradient goes to the first row
    /// attaining each maximum.
    pub fn reduce_max_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if m == 0 {
            return Err(Error::dim("max over zero rows"));
        }
        let mut arg = vec![0usize; n];
        let mut best = xv.row(0).to_vec();
        for r in 1..m {
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        let out = Tensor::new(&[1, n], best)?;
        self.push("reduce_max_rows", out, Op::MaxRows(x, arg))
    }

    /// Sum of each row as an `m×1` column.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, _) = xv.dims2()?;
        let data = (0..m).map(|r| xv.row(r).iter().copied().sum()).collect();
        let out = Tensor::new(&[m, 1], data)?;
        self.push("row_sum", out, Op::RowSum(x))
    }

    /// Sums consecutive blocks of `group` rows: `(g·group)×n → g×n`.
    pub fn group_sum_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if group == 0 || m % group != 0 {
            return Err(Error::dim(format!(
                "{m} rows do not split into groups of {group}"
            )));
        }
        let g = m / group;
        let mut data = vec![T::zero(); g * n];
        for r in 0..m {
            let dst = &mut data[(r / group) * n..(r / group + 1) * n];
            for (d, &v) in dst.iter_mut().zip(xv.row(r)) {
                *d = *d + v;
            }
        }
        let out = Tensor::new(&[g, n], data)?;
        self.push("group_sum_rows", out, Op::GroupSumRows(x, group))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x))
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (m, c) = lv.dims2()?;
        if m != 1 {
            return Err(Error::dim(format!("cross_entropy expects 1 row, got {m}")));
        }
        if label >= c {
            return Err(Error::param(format!("label {label} out of {c} classes")));
        }
        let row = lv.data();
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + z.ln();
        let probs = row.iter().map(|&v| (v - lse).exp()).collect();
        let out = Tensor::scalar(lse - row[label]);
        self.push("cross_entropy", out, Op::CrossEntropy(logits, label, probs))
    }

    /// Inverted dropout: in training each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`. Outside training, or with
    /// `p == 0`, this is the identity and returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param(format!("dropout p must lie in [0,1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push("dropout", out, Op::Mask(x, mask))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Records an externally computed value with a caller-supplied backward
    /// rule.
    pub fn custom(
        &mut self,
        operands: &[Var],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        self.push("custom", value, Op::Custom(operands.to_vec(), backward))
    }

    /// Gradients of the one-element tensor `loss` with respect to every leaf
    /// that requires them. Intermediate gradients are not retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // intermediate buffers are released once propagated
            let Some(g) = upper[0].take() else {
                continue;
            };
            self.backward_node(node, &g, lower);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].needs_grad)
                    .map(|d| Tensor::new(self.nodes[i].value.shape(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], lower: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k) = av.dims2().expect("matmul lhs");
                let n = bv.dims2().expect("matmul rhs").1;
                if let Some(ga) = slot(nodes, lower, *a) {
                    // dA (m×k) += dC (m×n) · Bᵀ (n×k)
                    T::gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), T::one(), ga);
                }
                if let Some(gb) = slot(nodes, lower, *b) {
                    // dB (k×n) += Aᵀ (k×m) · dC (m×n)
                    T::gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), T::one(), gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, lower, *a) {
                    add_into_row(ga, g);
                }
                if let Some(gb) = slot(nodes, lower, *b) {
                    add_into_row(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, lower, *a) {
                    add_into_row(ga, g);
                }
                if let Some(gb) = slot(nodes, lower, *b) {
                    zip_into(gb, g, |d, gi| *d = *d - gi);
                }
            }
            Op::Hadamard(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = slot(nodes, lower, *a) {
                    zip2_into(ga, g, bv, |d, gi, y| *d = *d + gi * y);
                }
                if let Some(gb) = slot(nodes, lower, *b) {
                    zip2_into(gb, g, av, |d, gi, x| *d = *d + gi * x);
                }
            }
            Op::Affine(a, s) => {
                if let Some(ga) = slot(nodes, lower, *a) {
                    let s = *s;
                    zip_into(ga, g, |d, gi| *d = *d + gi * s);
                }
            }
            Op::AddRowBroadcast(x, bias) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    add_into_row(gx, g);
                }
                if let Some(gb) = slot(nodes, lower, *bias) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        add_into_row(gb, row);
                    }
                }
            }
            Op::MulColBroadcast(x, col) => {
                let xv = nodes[x.0].value.data();
                let cv = nodes[col.0].value.data();
                let n = g.len() / cv.len();
                if let Some(gx) = slot(nodes, lower, *x) {
                    for ((dst, gr), &f) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(cv) {
                        zip_into(dst, gr, |d, gi| *d = *d + gi * f);
                    }
                }
                if let Some(gc) = slot(nodes, lower, *col) {
                    for ((d, gr), xr) in gc.iter_mut().zip(g.chunks_exact(n)).zip(xv.chunks_exact(n)) {
                        *d = *d + dot(gr, xr);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    zip2_into(gx, g, node.value.data(), |d, gi, y| {
                        *d = *d + gi * (T::one() - y * y)
                    });
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    zip2_into(gx, g, node.value.data(), |d, gi, y| {
                        *d = *d + gi * y * (T::one() - y)
                    });
                }
            }
            Op::LeakyRelu(x, slope) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let slope = *slope;
                    zip2_into(gx, g, nodes[x.0].value.data(), |d, gi, v| {
                        *d = *d + if v > T::zero() { gi } else { gi * slope }
                    });
                }
            }
            Op::RowSoftmax(x) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let y = node.value.data();
                    let n = node.value.dims2().expect("softmax shape").1;
                    for ((dst, gr), yr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let s = dot(gr, yr);
                        zip2_into(dst, gr, yr, |d, gi, yi| *d = *d + yi * (gi - s));
                    }
                }
            }
            Op::TopK(x, idx) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let n = nodes[x.0].value.dims2().expect("topk shape").1;
                    for r in 0..idx.rows() {
                        for (j, &c) in idx.row(r).iter().enumerate() {
                            gx[r * n + c] = gx[r * n + c] + g[r * idx.cols() + j];
                        }
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let n = nodes[x.0].value.dims2().expect("gather shape").1;
                    for (&src, gr) in indices.iter().zip(g.chunks_exact(n)) {
                        add_into_row(&mut gx[src * n..(src + 1) * n], gr);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(gp) = slot(nodes, lower, p) {
                        add_into_row(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let (m, n) = nodes[x.0].value.dims2().expect("mean shape");
                    let inv = T::one() / T::from_usize(m).expect("row count");
                    for dst in gx.chunks_exact_mut(n) {
                        zip_into(dst, g, |d, gi| *d = *d + gi * inv);
                    }
                }
            }
            Op::MaxRows(x, arg) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let n = arg.len();
                    for (c, &r) in arg.iter().enumerate() {
                        gx[r * n + c] = gx[r * n + c] + g[c];
                    }
                }
            }
            Op::RowSum(x) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let n = nodes[x.0].value.dims2().expect("row_sum shape").1;
                    for (dst, &gi) in gx.chunks_exact_mut(n).zip(g) {
                        for d in dst {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::GroupSumRows(x, group) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let n = nodes[x.0].value.dims2().expect("group shape").1;
                    for (r, dst) in gx.chunks_exact_mut(n).enumerate() {
                        let out = r / *group;
                        add_into_row(dst, &g[out * n..(out + 1) * n]);
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let (r, c) = nodes[x.0].value.dims2().expect("transpose shape");
                    // input (r×c) entry (a, b) receives output entry (b, a)
                    for (a, dst) in gx.chunks_exact_mut(c).enumerate() {
                        for (b, d) in dst.iter_mut().enumerate() {
                            *d = *d + g[b * r + a];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    add_into_row(gx, g);
                }
            }
            Op::CrossEntropy(x, label, probs) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    for (i, d) in gx.iter_mut().enumerate() {
                        let onehot = if i == *label { T::one() } else { T::zero() };
                        *d = *d + (probs[i] - onehot) * g[0];
                    }
                }
            }
            Op::Mask(x, mask) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    zip2_into(gx, g, mask, |d, gi, m| *d = *d + gi * m);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, lower, *x) {
                    let g0 = g[0];
                    for d in gx.iter_mut() {
                        *d = *d + g0;
                    }
                }
            }
            Op::Custom(operands, rule) => {
                let values: Vec<&Tensor<T>> = operands.iter().map(|v| &nodes[v.0].value).collect();
                let gout = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let parts = rule(&values, &node.value, &gout);
                for (&v, part) in operands.iter().zip(parts) {
                    if let Some(gv) = slot(nodes, lower, v) {
                        add_into_row(gv, part.data());
                    }
                }
            }
        }
    }
}

#[inline]
fn zip_into<T: Copy>(dst: &mut [T], a: &[T], f: impl Fn(&mut T, T)) {
    for (d, &x) in dst.iter_mut().zip(a) {
        f(d, x);
    }
}

#[inline]
fn zip2_into<T: Copy>(dst: &mut [T], a: &[T], b: &[T], f: impl Fn(&mut T, T, T)) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        f(d, x, y);
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    lower: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(lower[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]))
}

fn add_into_row<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
