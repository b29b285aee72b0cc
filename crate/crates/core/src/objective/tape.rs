//! Minimal reverse-mode differentiation tape over small dense matrices.
//!
//! Every node owns its forward value; backward walks the tape in reverse
//! and scatters adjoints into parent gradients. The op set is exactly what
//! the alignment objective needs, each op carries a hand-derived adjoint
//! that is unit-tested against central finite differences.

use crate::attention::NORM_EPS;
use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the gradient vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Differentiable input.
    Leaf,
    /// Non-differentiable input.
    Constant,
    Transpose(NodeId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    /// Each row scaled to unit Euclidean norm; zero rows pass through.
    RowUnit(NodeId),
    /// Entry divided by its column sum plus epsilon.
    NormCols(NodeId),
    /// Entry divided by its row sum plus epsilon.
    NormRows(NodeId),
    /// max(n*x - rowsum, 0) * x per entry.
    Focal(NodeId),
    RowSoftmax(NodeId, f64),
    RowLogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Scalars packed row-major into a rows x cols matrix.
    StackScalars(Vec<NodeId>),
    /// Rows gathered from (node, row index) pairs.
    StackRows(Vec<(NodeId, usize)>),
    /// Per-row cosine similarity of two equally shaped matrices.
    RowCosine(NodeId, NodeId),
    /// Per-row dot product of two equally shaped matrices.
    RowDot(NodeId, NodeId),
    /// Each row of the left operand scaled by the matching scalar of the
    /// right operand (rows x 1).
    ScaleRows(NodeId, NodeId),
    /// Picks entry `labels[r]` from row r.
    GatherCols(NodeId, Vec<usize>),
    /// sum over entries x > 0 of x * (ln x - lnq); lnq is a constant.
    KlRawPositive(NodeId, Mat),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "const",
            Op::Transpose(_) => "transpose",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElem(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Ln(_) => "ln",
            Op::Exp(_) => "exp",
            Op::RowUnit(_) => "row_unit",
            Op::NormCols(_) => "norm_cols",
            Op::NormRows(_) => "norm_rows",
            Op::Focal(_) => "focal",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowLogSoftmax(_) => "row_log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::StackScalars(_) => "stack_scalars",
            Op::StackRows(_) => "stack_rows",
            Op::RowCosine(..) => "row_cosine",
            Op::RowDot(..) => "row_dot",
            Op::ScaleRows(..) => "scale_rows",
            Op::GatherCols(..) => "gather_cols",
            Op::KlRawPositive(..) => "kl_raw_positive",
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    name: Option<String>,
}

#[derive(Default)]
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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn describe(&self, idx: usize) -> String {
        match &self.nodes[idx].name {
            Some(name) => name.clone(),
            None => format!("{}#{}", self.nodes[idx].op.kind(), idx),
        }
    }

    fn push(&mut self, value: Mat, op: Op, name: Option<String>) -> Result<NodeId> {
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op, name });
        if !self.nodes[idx].value.is_finite() {
            return Err(Error::Numeric { tensor: self.describe(idx) });
        }
        Ok(NodeId(idx))
    }

    pub fn leaf(&mut self, value: Mat, name: &str) -> Result<NodeId> {
        self.push(value, Op::Leaf, Some(name.to_string()))
    }

    pub fn constant(&mut self, value: Mat) -> Result<NodeId> {
        self.push(value, Op::Constant, None)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), None)
    }

    fn zip_elementwise(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() || va.cols() != vb.cols() {
            return Err(Error::DimensionMismatch(format!(
                "elementwise op on {}x{} and {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Mat::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_elementwise(a, b, |x, y| x + y)?;
        self.push(value, Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_elementwise(a, b, |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), None)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_elementwise(a, b, |x, y| x * y)?;
        self.push(value, Op::MulElem(a, b), None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), None)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v.max(0.0)).collect();
        let value = Mat::from_vec(src.rows(), src.cols(), data)?;
        self.push(value, Op::Relu(a), None)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v.ln()).collect();
        let value = Mat::from_vec(src.rows(), src.cols(), data)?;
        self.push(value, Op::Ln(a), None)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v.exp()).collect();
        let value = Mat::from_vec(src.rows(), src.cols(), data)?;
        self.push(value, Op::Exp(a), None)
    }

    pub fn row_unit(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let n = crate::mat::norm(src.row(r));
            if n > 0.0 {
                for v in value.row_mut(r) {
                    *v /= n;
                }
            }
        }
        self.push(value, Op::RowUnit(a), None)
    }

    pub fn norm_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let mut sums = vec![0.0; src.cols()];
        for r in 0..src.rows() {
            for (c, s) in sums.iter_mut().enumerate() {
                *s += src.get(r, c);
            }
        }
        let mut value = src.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                value.set(r, c, src.get(r, c) / (sums[c] + NORM_EPS));
            }
        }
        self.push(value, Op::NormCols(a), None)
    }

    pub fn norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let sum: f64 = src.row(r).iter().sum();
            for v in value.row_mut(r) {
                *v /= sum + NORM_EPS;
            }
        }
        self.push(value, Op::NormRows(a), None)
    }

    pub fn focal(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let n = src.cols() as f64;
        let mut value = src.clone();
        for r in 0..src.rows() {
            let row_sum: f64 = src.row(r).iter().sum();
            for c in 0..src.cols() {
                let x = src.get(r, c);
                value.set(r, c, (n * x - row_sum).max(0.0) * x);
            }
        }
        self.push(value, Op::Focal(a), None)
    }

    pub fn row_softmax(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        let src = self.value(a);
        let mut value = Mat::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let logits: Vec<f64> = src.row(r).iter().map(|v| v * tau).collect();
            value.row_mut(r).copy_from_slice(&crate::mat::softmax(&logits));
        }
        self.push(value, Op::RowSoftmax(a, tau), None)
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let mut value = Mat::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let row = src.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (c, v) in row.iter().enumerate() {
                value.set(r, c, v - lse);
            }
        }
        self.push(value, Op::RowLogSoftmax(a), None)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Mat::from_vec(1, 1, vec![total])?, Op::Sum(a), None)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let total: f64 = src.data().iter().sum();
        let value = Mat::from_vec(1, 1, vec![total / src.data().len() as f64])?;
        self.push(value, Op::Mean(a), None)
    }

    pub fn stack_scalars(&mut self, parts: &[NodeId], rows: usize, cols: usize) -> Result<NodeId> {
        if parts.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} scalars for a {}x{} stack",
                parts.len(),
                rows,
                cols
            )));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != 1 || v.cols() != 1 {
                return Err(Error::DimensionMismatch("stack_scalars expects 1x1 nodes".into()));
            }
            data.push(v.get(0, 0));
        }
        self.push(Mat::from_vec(rows, cols, data)?, Op::StackScalars(parts.to_vec()), None)
    }

    pub fn stack_rows(&mut self, parts: &[(NodeId, usize)]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("stack_rows needs at least one row".into()));
        }
        let cols = self.value(parts[0].0).cols();
        let mut rows = Vec::with_capacity(parts.len());
        for &(node, r) in parts {
            let v = self.value(node);
            if v.cols() != cols || r >= v.rows() {
                return Err(Error::DimensionMismatch("stack_rows shape mismatch".into()));
            }
            rows.push(v.row(r).to_vec());
        }
        self.push(Mat::from_rows(&rows)?, Op::StackRows(parts.to_vec()), None)
    }

    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() || va.cols() != vb.cols() {
            return Err(Error::DimensionMismatch("row_cosine shape mismatch".into()));
        }
        let mut data = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            data.push(crate::mat::cosine(va.row(r), vb.row(r)));
        }
        self.push(Mat::from_vec(va.rows(), 1, data)?, Op::RowCosine(a, b), None)
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() || va.cols() != vb.cols() {
            return Err(Error::DimensionMismatch("row_dot shape mismatch".into()));
        }
        let mut data = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            data.push(crate::mat::dot(va.row(r), vb.row(r)));
        }
        self.push(Mat::from_vec(va.rows(), 1, data)?, Op::RowDot(a, b), None)
    }

    pub fn scale_rows(&mut self, a: NodeId, scalars: NodeId) -> Result<NodeId> {
        let (va, vs) = (self.value(a), self.value(scalars));
        if vs.cols() != 1 || vs.rows() != va.rows() {
            return Err(Error::DimensionMismatch("scale_rows expects a rows x 1 scalar column".into()));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            let c = vs.get(r, 0);
            for v in value.row_mut(r) {
                *v *= c;
            }
        }
        self.push(value, Op::ScaleRows(a, scalars), None)
    }

    pub fn gather_cols(&mut self, a: NodeId, labels: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if labels.len() != va.rows() {
            return Err(Error::DimensionMismatch("one label per row required".into()));
        }
        let mut data = Vec::with_capacity(labels.len());
        for (r, &c) in labels.iter().enumerate() {
            if c >= va.cols() {
                return Err(Error::InvalidLabel(format!("label {c} out of range {}", va.cols())));
            }
            data.push(va.get(r, c));
        }
        self.push(Mat::from_vec(labels.len(), 1, data)?, Op::GatherCols(a, labels.to_vec()), None)
    }

    pub fn kl_raw_positive(&mut self, a: NodeId, lnq: Mat) -> Result<NodeId> {
        let va = self.value(a);
        if va.rows() != lnq.rows() || va.cols() != lnq.cols() {
            return Err(Error::DimensionMismatch("kl_raw_positive shape mismatch".into()));
        }
        let mut total = 0.0;
        for (x, q) in va.data().iter().zip(lnq.data()) {
            if *x > 0.0 {
                total += x * (x.ln() - q);
            }
        }
        self.push(Mat::from_vec(1, 1, vec![total])?, Op::KlRawPositive(a, lnq), None)
    }

    /// Runs reverse-mode accumulation from `root` (which must be scalar) and
    /// returns one gradient per node.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Mat>> {
        let root_val = self.value(root);
        if root_val.rows() != 1 || root_val.cols() != 1 {
            return Err(Error::InvalidInput("backward root must be a scalar node".into()));
        }
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root.0].set(0, 0, 1.0);

        for idx in (0..=root.0).rev() {
            let g = std::mem::replace(&mut grads[idx], Mat::zeros(0, 0));
            if g.data().iter().all(|v| *v == 0.0) {
                grads[idx] = g;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf | Op::Constant => {}
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    accumulate(&mut grads[a.0], &gt);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(&self.nodes[b.0].value)?;
                    let gb = self.nodes[a.0].value.transpose().matmul(&g)?;
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate_scaled(&mut grads[b.0], &g, -1.0);
                }
                Op::MulElem(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    accumulate_fn(&mut grads[a.0], g.data(), vb.data(), |g, o| g * o);
                    accumulate_fn(&mut grads[b.0], g.data(), va.data(), |g, o| g * o);
                }
                Op::Scale(a, c) => {
                    accumulate_scaled(&mut grads[a.0], &g, *c);
                }
                Op::Relu(a) => {
                    let va = &self.nodes[a.0].value;
                    accumulate_fn(&mut grads[a.0], g.data(), va.data(), |g, x| if x > 0.0 { g } else { 0.0 });
                }
                Op::Ln(a) => {
                    let va = &self.nodes[a.0].value;
                    accumulate_fn(&mut grads[a.0], g.data(), va.data(), |g, x| g / x);
                }
                Op::Exp(a) => {
                    let out = &self.nodes[idx].value;
                    accumulate_fn(&mut grads[a.0], g.data(), out.data(), |g, y| g * y);
                }
                Op::RowUnit(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[idx].value;
                    let target = &mut grads[a.0];
                    for r in 0..x.rows() {
                        let n = crate::mat::norm(x.row(r));
                        if n == 0.0 {
                            continue;
                        }
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let dot_gy = crate::mat::dot(gy, yr);
                        let trow = target.row_mut(r);
                        for c in 0..trow.len() {
                            trow[c] += (gy[c] - dot_gy * yr[c]) / n;
                        }
                    }
                }
                Op::NormCols(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[idx].value;
                    let mut denom = vec![NORM_EPS; x.cols()];
                    let mut weighted = vec![0.0; x.cols()];
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            denom[c] += x.get(r, c);
                            weighted[c] += g.get(r, c) * y.get(r, c);
                        }
                    }
                    let target = &mut grads[a.0];
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            let d = denom[c];
                            let add = g.get(r, c) / d - weighted[c] / d;
                            target.set(r, c, target.get(r, c) + add);
                        }
                    }
                }
                Op::NormRows(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[idx].value;
                    let target = &mut grads[a.0];
                    for r in 0..x.rows() {
                        let denom: f64 = x.row(r).iter().sum::<f64>() + NORM_EPS;
                        let weighted = crate::mat::dot(g.row(r), y.row(r));
                        let trow = target.row_mut(r);
                        for c in 0..trow.len() {
                            trow[c] += g.get(r, c) / denom - weighted / denom;
                        }
                    }
                }
                Op::Focal(a) => {
                    let x = &self.nodes[a.0].value;
                    let n = x.cols() as f64;
                    let target = &mut grads[a.0];
                    for r in 0..x.rows() {
                        let row_sum: f64 = x.row(r).iter().sum();
                        // shared = sum_b g_b * m_b * x_b over the row
                        let mut shared = 0.0;
                        for c in 0..x.cols() {
                            let u = n * x.get(r, c) - row_sum;
                            if u > 0.0 {
                                shared += g.get(r, c) * x.get(r, c);
                            }
                        }
                        let trow = target.row_mut(r);
                        for c in 0..trow.len() {
                            let xv = x.get(r, c);
                            let u = n * xv - row_sum;
                            let mut add = -shared;
                            if u > 0.0 {
                                add += g.get(r, c) * (n * xv + u);
                            }
                            trow[c] += add;
                        }
                    }
                }
                Op::RowSoftmax(a, tau) => {
                    let p = &self.nodes[idx].value;
                    let target = &mut grads[a.0];
                    for r in 0..p.rows() {
                        let dot_gp = crate::mat::dot(g.row(r), p.row(r));
                        let trow = target.row_mut(r);
                        for c in 0..trow.len() {
                            trow[c] += tau * p.get(r, c) * (g.get(r, c) - dot_gp);
                        }
                    }
                }
                Op::RowLogSoftmax(a) => {
                    let y = &self.nodes[idx].value;
                    let target = &mut grads[a.0];
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        let trow = target.row_mut(r);
                        for c in 0..trow.len() {
                            trow[c] += g.get(r, c) - y.get(r, c).exp() * gsum;
                        }
                    }
                }
                Op::Sum(a) => {
                    let gv = g.get(0, 0);
                    for v in grads[a.0].data_mut() {
                        *v += gv;
                    }
                }
                Op::Mean(a) => {
                    let len = self.nodes[a.0].value.data().len() as f64;
                    let gv = g.get(0, 0) / len;
                    for v in grads[a.0].data_mut() {
                        *v += gv;
                    }
                }
                Op::StackScalars(parts) => {
                    for (k, part) in parts.iter().enumerate() {
                        let gv = g.data()[k];
                        let cur = grads[part.0].get(0, 0);
                        grads[part.0].set(0, 0, cur + gv);
                    }
                }
                Op::StackRows(parts) => {
                    for (k, &(node, r)) in parts.iter().enumerate() {
                        let grow = g.row(k).to_vec();
                        let trow = grads[node.0].row_mut(r);
                        for (t, gv) in trow.iter_mut().zip(&grow) {
                            *t += gv;
                        }
                    }
                }
                Op::RowCosine(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let out = &self.nodes[idx].value;
                    for r in 0..va.rows() {
                        let na = crate::mat::norm(va.row(r));
                        let nb = crate::mat::norm(vb.row(r));
                        if na == 0.0 || nb == 0.0 {
                            continue;
                        }
                        let gv = g.get(r, 0);
                        if gv == 0.0 {
                            continue;
                        }
                        let c = out.get(r, 0);
                        {
                            let arow = va.row(r).to_vec();
                            let brow = vb.row(r).to_vec();
                            let ta = grads[a.0].row_mut(r);
                            for i in 0..ta.len() {
                                ta[i] += gv * (brow[i] / (na * nb) - c * arow[i] / (na * na));
                            }
                            let tb = grads[b.0].row_mut(r);
                            for i in 0..tb.len() {
                                tb[i] += gv * (arow[i] / (na * nb) - c * brow[i] / (nb * nb));
                            }
                        }
                    }
                }
                Op::RowDot(a, b) => {
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    for r in 0..va.rows() {
                        let gv = g.get(r, 0);
                        let ta = grads[a.0].row_mut(r);
                        for (t, x) in ta.iter_mut().zip(vb.row(r)) {
                            *t += gv * x;
                        }
                        let tb = grads[b.0].row_mut(r);
                        for (t, x) in tb.iter_mut().zip(va.row(r)) {
                            *t += gv * x;
                        }
                    }
                }
                Op::ScaleRows(a, scalars) => {
                    let va = self.nodes[a.0].value.clone();
                    let vs = self.nodes[scalars.0].value.clone();
                    for r in 0..va.rows() {
                        let c = vs.get(r, 0);
                        let ta = grads[a.0].row_mut(r);
                        for (t, gv) in ta.iter_mut().zip(g.row(r)) {
                            *t += gv * c;
                        }
                        let acc = crate::mat::dot(g.row(r), va.row(r));
                        let cur = grads[scalars.0].get(r, 0);
                        grads[scalars.0].set(r, 0, cur + acc);
                    }
                }
                Op::GatherCols(a, labels) => {
                    for (r, &c) in labels.iter().enumerate() {
                        let cur = grads[a.0].get(r, c);
                        grads[a.0].set(r, c, cur + g.get(r, 0));
                    }
                }
                Op::KlRawPositive(a, lnq) => {
                    let gv = g.get(0, 0);
                    let va = &self.nodes[a.0].value;
                    let target = &mut grads[a.0];
                    for i in 0..va.data().len() {
                        let x = va.data()[i];
                        if x > 0.0 {
                            target.data_mut()[i] += gv * (x.ln() - lnq.data()[i] + 1.0);
                        }
                    }
                }
            }
            grads[idx] = g;
        }
        Ok(grads)
    }
}

fn accumulate(target: &mut Mat, add: &Mat) {
    for (t, a) in target.data_mut().iter_mut().zip(add.data()) {
        *t += a;
    }
}

fn accumulate_scaled(target: &mut Mat, add: &Mat, c: f64) {
    for (t, a) in target.data_mut().iter_mut().zip(add.data()) {
        *t += a * c;
    }
}

fn accumulate_fn(target: &mut Mat, g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((t, gv), ov) in target.data_mut().iter_mut().zip(g).zip(other) {
        *t += f(*gv, *ov);
    }
}
