use super::kernels;
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `m×n + 1×n`
    AddRow(Var, Var),
    /// `m×n ⊙ 1×n`
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    /// `softmax(q·kᵀ)·v` with its probability matrix.
    Attention(Var, Var, Var, Vec<f64>),
    /// Bilinear lookup into an `h×w` grid of feature rows.
    GridSample(Var, Var, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Execution record for one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and `backward` walks it once in reverse.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Takes the value (with its gradient buffer) out of the graph.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let t = self.value(v);
        t.dims2().map_err(|_| TensorError::NotMatrix {
            op,
            shape: t.shape().to_vec(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a, op)?;
        let (r, n2) = self.dims(row, op)?;
        if r != 1 || n != n2 {
            return Err(shape_err(op, self.value(a), self.value(row)));
        }
        let (ta, tr) = (self.value(a).data(), self.value(row).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(ta[i * n..(i + 1) * n].iter().zip(tr).map(|(&x, &y)| f(x, y)));
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, rec))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// Scales every row of an `m×n` matrix elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, rec)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a, "softmax_rows")?;
        let out = kernels::softmax_rows(self.value(a).data(), m, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a, "log_softmax_rows")?;
        let out = kernels::log_softmax_rows(self.value(a).data(), m, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::LogSoftmaxRows(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a, "transpose")?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a, "slice_cols")?;
        if start + len > n {
            return Err(TensorError::OutOfBounds {
                op: "slice_cols",
                start,
                end: start + len,
                extent: n,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols(a, start)))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a, "slice_rows")?;
        if start + len > m {
            return Err(TensorError::OutOfBounds {
                op: "slice_rows",
                start,
                end: start + len,
                extent: m,
            });
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::new(&[len, n], out)?, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let (_, n) = self.dims(first, "concat_rows")?;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p, "concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", self.value(first), self.value(p)));
            }
            m += r;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a, "mean_rows")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::new(&[1, n], out)?, Op::MeanRows(a)))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `softmax_rows(q · kᵀ) · v` as one node, without the intermediate
    /// score and transpose nodes.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let (m, d) = self.dims(q, "attention")?;
        let (n, d2) = self.dims(k, "attention")?;
        let (n2, e) = self.dims(v, "attention")?;
        if d != d2 {
            return Err(shape_err("attention", self.value(q), self.value(k)));
        }
        if n != n2 {
            return Err(shape_err("attention", self.value(k), self.value(v)));
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            (m, n, d, e),
        );
        Ok(self.push(Tensor::new(&[m, e], out)?, Op::Attention(q, k, v, probs)))
    }

    /// Bilinear sampling of `feat` (`hw×c`, an `h×w` grid in row-major
    /// order) at `coords` (`n×2` fractional (row, col), cell centres at
    /// integers). Coordinates are clamped to the grid; clamped axes get zero
    /// gradient.
    pub fn grid_sample(&mut self, feat: Var, coords: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let (hw, c) = self.dims(feat, "grid_sample")?;
        let (n, two) = self.dims(coords, "grid_sample")?;
        if hw != h * w || h == 0 || w == 0 || two != 2 {
            return Err(shape_err("grid_sample", self.value(feat), self.value(coords)));
        }
        let out = kernels::grid_sample_forward(self.value(feat).data(), self.value(coords).data(), h, w, c);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::GridSample(feat, coords, h, w)))
    }

    /// Populates gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.nodes[idx].value.grad = Some(g);
            let node = &self.nodes[idx];
            let g: &[f64] = node.value.grad.as_deref().expect("set above");
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2()?;
                    let n = tb.shape()[1];
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_a_bt_acc(&g, tb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_at_b_acc(ta.data(), &g, &mut gb, m, k, n);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate_slice(&mut grads, *a, g);
                    accumulate_slice(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|x| -x).collect();
                    accumulate_slice(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let n = self.value(*row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                    }
                    accumulate_slice(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let tr = self.value(*row).data();
                    let ta = self.value(*a).data();
                    let n = tr.len();
                    let mut ga = vec![0.0; g.len()];
                    let mut gr = vec![0.0; n];
                    for (i, chunk) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            ga[i * n + j] = chunk[j] * tr[j];
                            gr[j] += chunk[j] * ta[i * n + j];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => {
                    let ga = g.iter().map(|x| x * s).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(x, y)| x * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(x, y)| x * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, &v)| {
                            if v > 0.0 {
                                *x
                            } else if v < 0.0 {
                                -x
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let (_, n) = node.value.dims2()?;
                    let y = node.value.data();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot = kernels::dot(gr, yr);
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let (_, n) = node.value.dims2()?;
                    let y = node.value.data();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            out[j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    let (m, n) = node.value.dims2()?;
                    accumulate(&mut grads, *a, kernels::transpose(&g, m, n));
                }
                Op::Reshape(a) => accumulate_slice(&mut grads, *a, g),
                Op::SliceCols(a, start) => {
                    let (m, n) = self.value(*a).dims2()?;
                    let len = node.value.shape()[1];
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        ga[i * n + start..i * n + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (m, n) = self.value(*a).dims2()?;
                    let mut ga = vec![0.0; m * n];
                    ga[start * n..start * n + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * n + offset..i * n + offset + w]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        accumulate(&mut grads, p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.value(*a).dims2()?;
                    let inv = 1.0 / m as f64;
                    let row: Vec<f64> = g.iter().map(|x| x * inv).collect();
                    let mut ga = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        ga.extend_from_slice(&row);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Attention(q, k, v, probs) => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (m, d) = tq.dims2()?;
                    let (n, e) = tv.dims2()?;
                    let (gq, gk, gv) =
                        kernels::attention_backward(tq.data(), tk.data(), tv.data(), probs, g, (m, n, d, e));
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::GridSample(f, x, h, w) => {
                    let (tf, tx) = (self.value(*f), self.value(*x));
                    let c = tf.shape()[1];
                    let (gf, gx) = kernels::grid_sample_backward(tf.data(), tx.data(), g, (*h, *w, c));
                    accumulate(&mut grads, *f, gf);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
            }
        }
        Ok(())
    }
}

fn accumulate_slice(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}
