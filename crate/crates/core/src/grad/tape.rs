use super::tensor::{matmul_raw, Tensor};
use super::GradError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Floor on vector norms before normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Dot(Var, Var),
    /// Saves the input norm.
    L2Normalize(Var, f64),
    /// Saves per-row norms.
    L2NormalizeRows(Var, Vec<f64>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in creation order, which is a topological
/// order of the graph. A tape built with [`Tape::no_grad`] computes values
/// only and keeps no adjoint information.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for constants and for leaves the root does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &str, detail: String) -> GradError {
    GradError::ShapeMismatch(format!("{op}: {detail}"))
}

fn rows_cols(t: &Tensor, op: &str) -> Result<(usize, usize), GradError> {
    if t.rank() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        let rg = self.recording;
        self.push_raw(t, Op::Leaf, rg)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest `|x|` over every ReLU input on the tape, `None` without ReLUs.
    /// Finite differences are only meaningful when this exceeds the step.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn push(&mut self, op_name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::DomainError(format!("{op_name} produced a non-finite value")));
        }
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), GradError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = rows_cols(self.value(a), "matmul")?;
        let (k2, n) = rows_cols(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let v = Tensor::matrix(m, n, matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n));
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        rows_cols(self.value(a), "transpose")?;
        let v = self.value(a).transpose();
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(GradError::DomainError("log of a non-positive value".into()));
        }
        let v = self.value(a).map(f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// `[m,n] + [n]`, the row added to every row of the matrix.
    pub fn broadcast_add_row(&mut self, a: Var, row: Var) -> Result<Var, GradError> {
        let (m, n) = rows_cols(self.value(a), "broadcast_add_row")?;
        let r = self.value(row);
        if r.rank() != 1 || r.len() != n {
            return Err(shape_err(
                "broadcast_add_row",
                format!("[{m},{n}] + {:?}", r.shape()),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        self.push("broadcast_add_row", Tensor::matrix(m, n, data), Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    /// Stacks matrices (or vectors, as single rows) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.rank() > 2 || t.cols() != cols {
                return Err(shape_err("concat_rows", format!("{:?} with {cols} columns", t.shape())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push("concat_rows", Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, GradError> {
        let (m, n) = rows_cols(self.value(a), "slice_rows")?;
        if start > end || end > m {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        self.push("slice_rows", Tensor::matrix(end - start, n, data), Op::SliceRows(a, start), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(shape_err("dot", format!("{:?} . {:?}", ta.shape(), tb.shape())));
        }
        let v: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push("dot", Tensor::scalar(v), Op::Dot(a, b), &[a, b])
    }

    /// `v / ‖v‖` for a vector; fails when `‖v‖ < 1e-12`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, GradError> {
        let t = self.value(a);
        if t.rank() != 1 {
            return Err(shape_err("l2_normalize", format!("expected a vector, got {:?}", t.shape())));
        }
        let norm = t.norm();
        if norm < NORM_EPS {
            return Err(GradError::DomainError(format!("l2_normalize of a vector with norm {norm:e}")));
        }
        let v = t.map(|x| x / norm);
        self.push("l2_normalize", v, Op::L2Normalize(a, norm), &[a])
    }

    /// Row-wise [`Tape::l2_normalize`].
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let (m, n) = rows_cols(self.value(a), "l2_normalize_rows")?;
        let t = self.value(a);
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(GradError::DomainError(format!("l2_normalize_rows: row {i} has norm {norm:e}")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        self.push("l2_normalize_rows", Tensor::matrix(m, n, data), Op::L2NormalizeRows(a, norms), &[a])
    }

    /// Max-shifted softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let (m, n) = rows_cols(self.value(a), "softmax_rows")?;
        let t = self.value(a);
        let mut data = vec![0.0; m * n];
        for (i, out) in data.chunks_mut(n.max(1)).enumerate().take(m) {
            softmax_row(t.row(i), out);
        }
        self.push("softmax_rows", Tensor::matrix(m, n, data), Op::SoftmaxRows(a), &[a])
    }

    /// `x - max - log Σ exp(x - max)` over each row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let (m, n) = rows_cols(self.value(a), "log_softmax_rows")?;
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x - max - lse));
        }
        self.push("log_softmax_rows", Tensor::matrix(m, n, data), Op::LogSoftmaxRows(a), &[a])
    }

    /// Rows of `a` at `indices`, repeats allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, GradError> {
        let (m, n) = rows_cols(self.value(a), "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {m} rows")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::matrix(indices.len(), n, data),
            Op::GatherRows(a, indices.to_vec()),
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let v = self.value(a).reshaped(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, GradError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(GradError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        // Keep only leaf gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul(&vb.transpose()));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, va.transpose().matmul(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Sum(a) => {
                let va = self.value(*a);
                let s = g.item();
                self.accumulate(grads, *a, va.map(|_| s));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let s = g.item() / va.len() as f64;
                self.accumulate(grads, *a, va.map(|_| s));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let n = g.cols();
                let mut col = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (c, v) in col.iter_mut().zip(chunk) {
                        *c += v;
                    }
                }
                self.accumulate(grads, *row, Tensor::vector(col));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let len = vp.rows() * n;
                    let piece = Tensor::new(vp.shape().to_vec(), g.data()[offset..offset + len].to_vec())
                        .expect("concat slice matches part shape");
                    offset += len;
                    self.accumulate(grads, *p, piece);
                }
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let n = va.cols();
                let mut full = Tensor::zeros(va.shape());
                full.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, full);
            }
            Op::Dot(a, b) => {
                let s = g.item();
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, vb.map(|y| y * s));
                self.accumulate(grads, *b, va.map(|x| x * s));
            }
            Op::L2Normalize(a, norm) => {
                // d(v/|v|) = (g - u (u·g)) / |v|
                let ug: f64 = out.data().iter().zip(g.data()).map(|(u, x)| u * x).sum();
                self.accumulate(grads, *a, g.zip_map(out, |x, u| (x - u * ug) / norm));
            }
            Op::L2NormalizeRows(a, norms) => {
                let n = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for (i, norm) in norms.iter().enumerate() {
                    let (u, gr) = (out.row(i), &g.data()[i * n..(i + 1) * n]);
                    let ug: f64 = u.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(u.iter().zip(gr).map(|(uv, gv)| (gv - uv * ug) / norm));
                }
                self.accumulate(grads, *a, Tensor::matrix(out.rows(), n, data));
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for i in 0..out.rows() {
                    let (s, gr) = (out.row(i), &g.data()[i * n..(i + 1) * n]);
                    let sg: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(s.iter().zip(gr).map(|(sv, gv)| sv * (gv - sg)));
                }
                self.accumulate(grads, *a, Tensor::matrix(out.rows(), n, data));
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for i in 0..out.rows() {
                    let (ls, gr) = (out.row(i), &g.data()[i * n..(i + 1) * n]);
                    let gsum: f64 = gr.iter().sum();
                    data.extend(ls.iter().zip(gr).map(|(l, gv)| gv - l.exp() * gsum));
                }
                self.accumulate(grads, *a, Tensor::matrix(out.rows(), n, data));
            }
            Op::GatherRows(a, indices) => {
                let va = self.value(*a);
                let n = va.cols();
                let mut full = Tensor::zeros(va.shape());
                let fd = full.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for (dst, src) in fd[i * n..(i + 1) * n].iter_mut().zip(&g.data()[k * n..(k + 1) * n]) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *a, full);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshaped(&shape).expect("reshape adjoint"));
            }
        }
    }
}
