//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Graph`] is a define-by-run tape: every forward op appends a node
//! holding its value and its input ids, and [`Graph::backward`] walks the
//! tape in reverse to accumulate gradients. Graphs are built per forward
//! pass and dropped afterwards; parameters live outside the graph in a
//! [`ParamStore`] and are copied in as leaves each pass.
//!
//! Everything is 64-bit. Accumulation orders are fixed, so identical inputs
//! produce bitwise-identical values and gradients.

mod linalg;
mod params;

pub use params::{AdamWConfig, BoundParams, ParamStore, ParamStoreError};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-d operand, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: slice [{start}, {start}+{len}) out of range for {cols} columns")]
    SliceOutOfRange {
        op: &'static str,
        start: usize,
        len: usize,
        cols: usize,
    },
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

/// Dense row-major array of f64 with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a 2-d tensor; a 1-d tensor counts as a single row.
    fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Size of the last dimension.
    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// Adds a 1-d bias to every row of a 2-d operand.
    BiasAdd(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// Concatenation along the last dimension.
    Concat(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Per-row scaling by a constant vector (no gradient for the scales).
    RowScale {
        x: NodeId,
        scale: Vec<f64>,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    MeanSquare(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar loss with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a node, if the node influences the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables NaN/Inf detection after every op (checked mode).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, GraphError> {
        if self.check_finite && !value.is_finite() {
            return Err(GraphError::NonFinite { op: op_name(&op) });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    /// Inserts a constant or parameter leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(GraphError::ShapeMismatch {
                op: "add",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape.clone(), data);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(GraphError::ShapeMismatch {
                op: "sub",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape.clone(), data);
        self.push(Op::Sub(a, b), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != 2 {
            return Err(GraphError::NotMatrix {
                op: "matmul",
                shape: va.shape.clone(),
            });
        }
        if vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let data = linalg::matmul(&va.data, &vb.data, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, data))
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let cols = vx.cols();
        if vb.shape.len() != 1 || vb.shape[0] != cols {
            return Err(GraphError::ShapeMismatch {
                op: "bias_add",
                lhs: vx.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let mut data = vx.data.clone();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(&vb.data) {
                *v += b;
            }
        }
        let value = Tensor::new(vx.shape.clone(), data);
        self.push(Op::BiasAdd(x, bias), value)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(vx.shape.clone(), data);
        self.push(Op::Gelu(x), value)
    }

    /// Layer normalization over the last dimension with learned affine
    /// parameters. A constant row normalizes to zeros (pre-affine).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, GraphError> {
        let vx = &self.nodes[x.0].value;
        let cols = vx.cols();
        for p in [gamma, beta] {
            let vp = &self.nodes[p.0].value;
            if vp.shape.len() != 1 || vp.shape[0] != cols {
                return Err(GraphError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vx.shape.clone(),
                    rhs: vp.shape.clone(),
                });
            }
        }
        let vg = self.nodes[gamma.0].value.data.clone();
        let vb = self.nodes[beta.0].value.data.clone();
        let vx = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(vx.data.len());
        for row in vx.data.chunks(cols) {
            let (mean, inv) = row_moments(row, eps);
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv * vg[j] + vb[j]);
            }
        }
        let value = Tensor::new(vx.shape.clone(), data);
        self.push(Op::LayerNorm { x, gamma, beta, eps }, value)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape.len() != vb.shape.len() || va.rows() != vb.rows() {
            return Err(GraphError::ShapeMismatch {
                op: "concat",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let rows = va.rows();
        let mut data = Vec::with_capacity(va.data.len() + vb.data.len());
        for i in 0..rows {
            data.extend_from_slice(&va.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb.data[i * cb..(i + 1) * cb]);
        }
        let shape = if va.shape.len() == 2 {
            vec![rows, ca + cb]
        } else {
            vec![ca + cb]
        };
        self.push(Op::Concat(a, b), Tensor::new(shape, data))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, GraphError> {
        let vx = &self.nodes[x.0].value;
        let cols = vx.cols();
        if start + len > cols {
            return Err(GraphError::SliceOutOfRange {
                op: "slice_cols",
                start,
                len,
                cols,
            });
        }
        let rows = vx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&vx.data[i * cols + start..i * cols + start + len]);
        }
        let shape = if vx.shape.len() == 2 {
            vec![rows, len]
        } else {
            vec![len]
        };
        self.push(Op::SliceCols { x, start, len }, Tensor::new(shape, data))
    }

    /// Multiplies row `i` by `scale[i]`. The scales are constants.
    pub fn row_scale(&mut self, x: NodeId, scale: Vec<f64>) -> Result<NodeId, GraphError> {
        let vx = &self.nodes[x.0].value;
        if scale.len() != vx.rows() {
            return Err(GraphError::ShapeMismatch {
                op: "row_scale",
                lhs: vx.shape.clone(),
                rhs: vec![scale.len()],
            });
        }
        let cols = vx.cols();
        let mut data = vx.data.clone();
        for (i, row) in data.chunks_mut(cols).enumerate() {
            for v in row {
                *v *= scale[i];
            }
        }
        let value = Tensor::new(vx.shape.clone(), data);
        self.push(Op::RowScale { x, scale }, value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let vx = &self.nodes[x.0].value;
        let data = vx.data.iter().map(|v| v * c).collect();
        let value = Tensor::new(vx.shape.clone(), data);
        self.push(Op::Scale { x, c }, value)
    }

    /// Mean of squared entries, reduced to a scalar.
    pub fn mean_square(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let vx = &self.nodes[x.0].value;
        let n = vx.data.len() as f64;
        let mut acc = 0.0;
        for &v in &vx.data {
            acc += v * v;
        }
        self.push(Op::MeanSquare(x), Tensor::scalar(acc / n))
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// node that influences the loss; leaves not on a path to the loss get
    /// `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GraphError> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(GraphError::NonScalarLoss {
                shape: lv.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(grads, *a, &self.nodes[a.0].value.shape, &g.data);
                add_grad(grads, *b, &self.nodes[b.0].value.shape, &g.data);
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, &self.nodes[a.0].value.shape, &g.data);
                let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                add_grad(grads, *b, &self.nodes[b.0].value.shape, &neg);
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                let da = linalg::matmul_bt(&g.data, &vb.data, m, k, n);
                let db = linalg::matmul_at(&va.data, &g.data, m, k, n);
                add_grad(grads, *a, &va.shape, &da);
                add_grad(grads, *b, &vb.shape, &db);
            }
            Op::BiasAdd(x, bias) => {
                let vx = &self.nodes[x.0].value;
                let cols = vx.cols();
                add_grad(grads, *x, &vx.shape, &g.data);
                let mut db = vec![0.0; cols];
                for row in g.data.chunks(cols) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                add_grad(grads, *bias, &[cols], &db);
            }
            Op::Gelu(x) => {
                let vx = &self.nodes[x.0].value;
                let dx: Vec<f64> = vx
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, gv)| gelu_grad(v) * gv)
                    .collect();
                add_grad(grads, *x, &vx.shape, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gamma.0].value;
                let cols = vx.cols();
                let mut dx = vec![0.0; vx.data.len()];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for (row_idx, (row, grow)) in
                    vx.data.chunks(cols).zip(g.data.chunks(cols)).enumerate()
                {
                    let (mean, inv) = row_moments(row, *eps);
                    let nf = cols as f64;
                    // xhat = (x - mean) * inv; dxhat = g * gamma
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * vg.data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * vg.data[j];
                        dx[row_idx * cols + j] =
                            inv * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                    }
                }
                add_grad(grads, *x, &vx.shape, &dx);
                add_grad(grads, *gamma, &[cols], &dgamma);
                add_grad(grads, *beta, &[cols], &dbeta);
            }
            Op::Concat(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (ca, cb) = (va.cols(), vb.cols());
                let rows = va.rows();
                let mut da = vec![0.0; va.data.len()];
                let mut db = vec![0.0; vb.data.len()];
                for i in 0..rows {
                    let grow = &g.data[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da[i * ca..(i + 1) * ca].copy_from_slice(&grow[..ca]);
                    db[i * cb..(i + 1) * cb].copy_from_slice(&grow[ca..]);
                }
                add_grad(grads, *a, &va.shape, &da);
                add_grad(grads, *b, &vb.shape, &db);
            }
            Op::SliceCols { x, start, len } => {
                let vx = &self.nodes[x.0].value;
                let cols = vx.cols();
                let rows = vx.rows();
                let mut dx = vec![0.0; vx.data.len()];
                for i in 0..rows {
                    dx[i * cols + start..i * cols + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                add_grad(grads, *x, &vx.shape, &dx);
            }
            Op::RowScale { x, scale } => {
                let vx = &self.nodes[x.0].value;
                let cols = vx.cols();
                let mut dx = Vec::with_capacity(vx.data.len());
                for (i, grow) in g.data.chunks(cols).enumerate() {
                    dx.extend(grow.iter().map(|gv| gv * scale[i]));
                }
                add_grad(grads, *x, &vx.shape, &dx);
            }
            Op::Scale { x, c } => {
                let vx = &self.nodes[x.0].value;
                let dx: Vec<f64> = g.data.iter().map(|gv| gv * c).collect();
                add_grad(grads, *x, &vx.shape, &dx);
            }
            Op::MeanSquare(x) => {
                let vx = &self.nodes[x.0].value;
                let n = vx.data.len() as f64;
                let s = 2.0 * g.data[0] / n;
                let dx: Vec<f64> = vx.data.iter().map(|v| v * s).collect();
                add_grad(grads, *x, &vx.shape, &dx);
            }
        }
    }
}

fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: &[f64]) {
    match &mut grads[id.0] {
        Some(t) => {
            for (g, d) in t.data.iter_mut().zip(delta) {
                *g += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()));
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::MatMul(..) => "matmul",
        Op::BiasAdd(..) => "bias_add",
        Op::Gelu(..) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Concat(..) => "concat",
        Op::SliceCols { .. } => "slice_cols",
        Op::RowScale { .. } => "row_scale",
        Op::Scale { .. } => "scale",
        Op::MeanSquare(..) => "mean_square",
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

// tanh-form smooth GELU
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences through an arbitrary closure rebuilding
    /// the forward pass from flat parameter values.
    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + step;
            let hi = f(&xp);
            xp[i] = orig - step;
            let lo = f(&xp);
            xp[i] = orig;
            g.push((hi - lo) / (2.0 * step));
        }
        g
    }

    fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
        got.iter()
            .zip(want)
            .map(|(g, w)| (g - w).abs() / w.abs().max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_scalar_case() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(1, 1, vec![2.0]));
        let b = g.leaf(Tensor::matrix(1, 1, vec![3.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn mean_square_example() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let y = g.mean_square(x).unwrap();
        assert_eq!(g.value(y).item(), 12.5);
    }

    #[test]
    fn layernorm_of_constant_row_is_beta() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 4, vec![7.0; 8]));
        let gamma = g.leaf(Tensor::vector(vec![1.0; 4]));
        let beta = g.leaf(Tensor::vector(vec![0.0; 4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn square_gradient() {
        // f(x) = mean_square(x) with x scalar = x^2; df/dx at 3 is 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]));
        let y = g.mean_square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(GraphError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn matmul_gradient_matches_central_differences() {
        // f(W) = mean_square(W v) for a 4x4 W
        let v: Vec<f64> = vec![0.3, -0.7, 1.1, 0.25];
        let w0: Vec<f64> = (0..16).map(|i| ((i * 37 % 17) as f64 - 8.0) / 9.0).collect();
        let f = |w: &[f64]| -> f64 {
            let mut g = Graph::new();
            let wn = g.leaf(Tensor::matrix(4, 4, w.to_vec()));
            let vn = g.leaf(Tensor::matrix(4, 1, v.clone()));
            let y = g.matmul(wn, vn).unwrap();
            let l = g.mean_square(y).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new();
        let wn = g.leaf(Tensor::matrix(4, 4, w0.clone()));
        let vn = g.leaf(Tensor::matrix(4, 1, v.clone()));
        let y = g.matmul(wn, vn).unwrap();
        let l = g.mean_square(y).unwrap();
        let grads = g.backward(l).unwrap();
        let fd = finite_diff(&f, &w0, 1e-5);
        let err = max_rel_err(grads.wrt(wn).unwrap().data(), &fd);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn composite_graph_gradient_matches_central_differences() {
        // leaf -> layernorm -> linear -> gelu -> slice/concat -> mean_square
        let x0: Vec<f64> = (0..12).map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.5).collect();
        let f = |p: &[f64]| -> f64 {
            let (x, rest) = p.split_at(12);
            let (w, rest2) = rest.split_at(16);
            let (gamma, beta) = rest2.split_at(4);
            let mut g = Graph::new();
            let xn = g.leaf(Tensor::matrix(3, 4, x.to_vec()));
            let gn = g.leaf(Tensor::vector(gamma.to_vec()));
            let bn = g.leaf(Tensor::vector(beta.to_vec()));
            let ln = g.layer_norm(xn, gn, bn, 1e-5).unwrap();
            let wn = g.leaf(Tensor::matrix(4, 4, w.to_vec()));
            let h = g.matmul(ln, wn).unwrap();
            let a = g.gelu(h).unwrap();
            let left = g.slice_cols(a, 0, 2).unwrap();
            let right = g.slice_cols(a, 2, 2).unwrap();
            let cat = g.concat(left, right).unwrap();
            let d = g.sub(cat, xn).unwrap();
            let l = g.mean_square(d).unwrap();
            g.value(l).item()
        };
        let mut p = x0.clone();
        p.extend((0..16).map(|i| ((i * 11 % 19) as f64 - 9.0) / 11.0));
        p.extend((0..4).map(|i| 1.0 + 0.1 * i as f64)); // gamma
        p.extend((0..4).map(|i| 0.05 * i as f64)); // beta

        // analytic grads via one graph
        let (x, rest) = p.split_at(12);
        let (w, rest2) = rest.split_at(16);
        let (gamma, beta) = rest2.split_at(4);
        let mut g = Graph::new();
        let xn = g.leaf(Tensor::matrix(3, 4, x.to_vec()));
        let gn = g.leaf(Tensor::vector(gamma.to_vec()));
        let bn = g.leaf(Tensor::vector(beta.to_vec()));
        let ln = g.layer_norm(xn, gn, bn, 1e-5).unwrap();
        let wn = g.leaf(Tensor::matrix(4, 4, w.to_vec()));
        let h = g.matmul(ln, wn).unwrap();
        let a = g.gelu(h).unwrap();
        let left = g.slice_cols(a, 0, 2).unwrap();
        let right = g.slice_cols(a, 2, 2).unwrap();
        let cat = g.concat(left, right).unwrap();
        let d = g.sub(cat, xn).unwrap();
        let l = g.mean_square(d).unwrap();
        let grads = g.backward(l).unwrap();

        let mut analytic = grads.wrt(xn).unwrap().data().to_vec();
        analytic.extend_from_slice(grads.wrt(wn).unwrap().data());
        analytic.extend_from_slice(grads.wrt(gn).unwrap().data());
        analytic.extend_from_slice(grads.wrt(bn).unwrap().data());

        let fd = finite_diff(&f, &p, 1e-5);
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn gradient_of_summed_losses_is_sum_of_gradients() {
        let x0 = vec![0.4, -1.3, 2.2];
        let grad_of = |combine: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(x0.clone()));
            let l1 = g.mean_square(x).unwrap();
            if combine {
                let sq = g.gelu(x).unwrap();
                let l2 = g.mean_square(sq).unwrap();
                let tot = g.add(l1, l2).unwrap();
                let grads = g.backward(tot).unwrap();
                grads.wrt(x).unwrap().data().to_vec()
            } else {
                let grads = g.backward(l1).unwrap();
                let g1 = grads.wrt(x).unwrap().data().to_vec();
                let mut g2graph = Graph::new();
                let x2 = g2graph.leaf(Tensor::vector(x0.clone()));
                let sq = g2graph.gelu(x2).unwrap();
                let l2 = g2graph.mean_square(sq).unwrap();
                let grads2 = g2graph.backward(l2).unwrap();
                let g2 = grads2.wrt(x2).unwrap().data().to_vec();
                g1.iter().zip(&g2).map(|(a, b)| a + b).collect()
            }
        };
        let combined = grad_of(true);
        let summed = grad_of(false);
        for (c, s) in combined.iter().zip(&summed) {
            assert!((c - s).abs() < 1e-15);
        }
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let x = g.leaf(Tensor::vector(vec![1e308]));
        let y = g.scale(x, 1e10);
        assert!(matches!(y, Err(GraphError::NonFinite { .. })));
    }
}
