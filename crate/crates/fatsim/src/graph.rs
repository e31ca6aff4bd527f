//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and backward is a single reverse sweep. Gradient
//! accumulation follows that fixed order, which keeps runs reproducible
//! bit for bit.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: Option<String> },
    MatMul,
    Add,
    /// Matrix plus a length-C vector broadcast over rows.
    AddRow,
    Scale(f64),
    Softmax,
    LayerNorm { eps: f64 },
    Gelu,
    CrossEntropy { labels: Vec<usize> },
    Transpose,
    NarrowRows { start: usize },
    NarrowCols { start: usize },
    ConcatRows,
    ConcatCols,
    MeanRows,
    /// [H,W,C] image to N x (P^2 C) row-major patch matrix.
    Patchify { h: usize, w: usize, c: usize, p: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Computation tape. Values are computed eagerly as nodes are appended.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { name: None }, vec![], value)
    }

    /// Named leaf; its gradient shows up in [`Gradients::by_name`].
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                name: Some(name.to_string()),
            },
            vec![],
            value,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a, b], v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    /// `a` is R x C, `row` is a C-length vector added to every row.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        let r = self.value(row);
        if m.cols() != r.len() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: m.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let cols = m.cols();
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r.data()[i % cols])
            .collect();
        let v = Tensor::new(m.shape().to_vec(), data);
        Ok(self.push(Op::AddRow, vec![a, row], v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(s), vec![a], v)
    }

    /// Row-wise softmax over the trailing axis, with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = softmax_forward(x);
        self.push(Op::Softmax, vec![a], v)
    }

    /// Row-wise layer normalization followed by the gamma/beta affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let d = xv.cols();
        if g.len() != d || b.len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros_like(xv);
        for r in 0..xv.rows() {
            let row: Vec<f64> = (0..d).map(|c| xv.at(r, c)).collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                let norm = (row[c] - mean) * inv;
                out.set(r, c, norm * g.data()[c] + b.data()[c]);
            }
        }
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], out))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_scalar);
        self.push(Op::Gelu, vec![a], v)
    }

    /// Mean of -log softmax(logits)[label] over the batch; returns a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        let (b, c) = (l.rows(), l.cols());
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: l.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
        }
        let probs = softmax_forward(l);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            loss -= probs.at(r, y).ln();
        }
        loss /= b as f64;
        Ok(self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose, vec![a], v)
    }

    pub fn narrow_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        let cols = x.cols();
        assert!(start + len <= x.rows(), "narrow_rows out of range");
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        let v = Tensor::new(vec![len, cols], data);
        self.push(Op::NarrowRows { start }, vec![a], v)
    }

    pub fn narrow_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        assert!(start + len <= cols, "narrow_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
        }
        let v = Tensor::new(vec![rows, len], data);
        self.push(Op::NarrowCols { start }, vec![a], v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, cols], data);
        Ok(self.push(Op::ConcatRows, parts.to_vec(), v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let t = self.value(p);
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(vec![rows, total], data);
        Ok(self.push(Op::ConcatCols, parts.to_vec(), v))
    }

    /// Column-wise mean over rows: R x C -> 1 x C.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += x.at(r, c);
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        let v = Tensor::new(vec![1, cols], data);
        self.push(Op::MeanRows, vec![a], v)
    }

    /// Extract non-overlapping P x P patches in row-major patch order and
    /// flatten each patch row-major over (row, col, channel).
    pub fn patchify(&mut self, img: NodeId, h: usize, w: usize, c: usize, p: usize) -> Result<NodeId> {
        let x = self.value(img);
        if x.shape() != [h, w, c] {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                lhs: x.shape().to_vec(),
                rhs: vec![h, w, c],
            });
        }
        let (ph, pw) = (h / p, w / p);
        let mut data = Vec::with_capacity(h * w * c);
        for pr in 0..ph {
            for pc in 0..pw {
                for dr in 0..p {
                    for dc in 0..p {
                        for ch in 0..c {
                            let (r, col) = (pr * p + dr, pc * p + dc);
                            data.push(x.data()[(r * w + col) * c + ch]);
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![ph * pw, p * p * c], data);
        Ok(self.push(Op::Patchify { h, w, c, p }, vec![img], v))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<'_>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros_like(&n.value))
            .collect();
        let mut seed = Tensor::zeros_like(lv);
        seed.data_mut()[0] = 1.0;
        grads[loss.0] = seed;

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let g = grads[i].clone();
            match &node.op {
                Op::Leaf { .. } => {}
                Op::MatMul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let da = g.matmul(&self.value(b).transpose())?;
                    let db = self.value(a).transpose().matmul(&g)?;
                    grads[a.0].axpy(1.0, &da);
                    grads[b.0].axpy(1.0, &db);
                }
                Op::Add => {
                    grads[node.inputs[0].0].axpy(1.0, &g);
                    grads[node.inputs[1].0].axpy(1.0, &g);
                }
                Op::AddRow => {
                    let (a, row) = (node.inputs[0], node.inputs[1]);
                    grads[a.0].axpy(1.0, &g);
                    let cols = g.cols();
                    for (i, &v) in g.data().iter().enumerate() {
                        grads[row.0].data_mut()[i % cols] += v;
                    }
                }
                Op::Scale(s) => grads[node.inputs[0].0].axpy(*s, &g),
                Op::Softmax => {
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let dst = &mut grads[node.inputs[0].0];
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += g.at(r, c) * y.at(r, c);
                        }
                        for c in 0..cols {
                            let v = y.at(r, c) * (g.at(r, c) - dot);
                            dst.set(r, c, dst.at(r, c) + v);
                        }
                    }
                }
                Op::LayerNorm { eps } => {
                    let (x, gamma, _) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let xv = self.value(x).clone();
                    let gv = self.value(gamma).clone();
                    let d = xv.cols();
                    for r in 0..xv.rows() {
                        let row: Vec<f64> = (0..d).map(|c| xv.at(r, c)).collect();
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let norm: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        // d beta, d gamma
                        for c in 0..d {
                            grads[node.inputs[2].0].data_mut()[c] += g.at(r, c);
                            grads[node.inputs[1].0].data_mut()[c] += g.at(r, c) * norm[c];
                        }
                        // d x via the standard layer-norm backward
                        let dnorm: Vec<f64> =
                            (0..d).map(|c| g.at(r, c) * gv.data()[c]).collect();
                        let mean_dn = dnorm.iter().sum::<f64>() / d as f64;
                        let mean_dn_norm = dnorm
                            .iter()
                            .zip(&norm)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        let dst = &mut grads[x.0];
                        for c in 0..d {
                            let v = inv * (dnorm[c] - mean_dn - norm[c] * mean_dn_norm);
                            dst.set(r, c, dst.at(r, c) + v);
                        }
                    }
                }
                Op::Gelu => {
                    let x = self.value(node.inputs[0]);
                    let dst = &mut grads[node.inputs[0].0];
                    for (i, &xi) in x.data().iter().enumerate() {
                        dst.data_mut()[i] += g.data()[i] * gelu_grad_scalar(xi);
                    }
                }
                Op::CrossEntropy { labels } => {
                    let logits = self.value(node.inputs[0]);
                    let probs = softmax_forward(logits);
                    let b = labels.len() as f64;
                    let scale = g.item() / b;
                    let dst = &mut grads[node.inputs[0].0];
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..logits.cols() {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            let v = scale * (probs.at(r, c) - onehot);
                            dst.set(r, c, dst.at(r, c) + v);
                        }
                    }
                }
                Op::Transpose => {
                    let gt = g.transpose();
                    grads[node.inputs[0].0].axpy(1.0, &gt);
                }
                Op::NarrowRows { start } => {
                    let cols = g.cols();
                    let dst = &mut grads[node.inputs[0].0];
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            dst.set(start + r, c, dst.at(start + r, c) + g.at(r, c));
                        }
                    }
                }
                Op::NarrowCols { start } => {
                    let dst = &mut grads[node.inputs[0].0];
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            dst.set(r, start + c, dst.at(r, start + c) + g.at(r, c));
                        }
                    }
                }
                Op::ConcatRows => {
                    let mut row = 0;
                    for &inp in &node.inputs {
                        let n = self.value(inp).rows();
                        let cols = g.cols();
                        let dst = &mut grads[inp.0];
                        for r in 0..n {
                            for c in 0..cols {
                                dst.set(r, c, dst.at(r, c) + g.at(row + r, c));
                            }
                        }
                        row += n;
                    }
                }
                Op::ConcatCols => {
                    let mut col = 0;
                    for &inp in &node.inputs {
                        let w = self.value(inp).cols();
                        let dst = &mut grads[inp.0];
                        for r in 0..g.rows() {
                            for c in 0..w {
                                dst.set(r, c, dst.at(r, c) + g.at(r, col + c));
                            }
                        }
                        col += w;
                    }
                }
                Op::MeanRows => {
                    let n = self.value(node.inputs[0]).rows();
                    let cols = g.cols();
                    let dst = &mut grads[node.inputs[0].0];
                    for r in 0..n {
                        for c in 0..cols {
                            dst.set(r, c, dst.at(r, c) + g.at(0, c) / n as f64);
                        }
                    }
                }
                Op::Patchify { h, w, c, p } => {
                    let (h, w, c, p) = (*h, *w, *c, *p);
                    let pw = w / p;
                    let dst = &mut grads[node.inputs[0].0];
                    for (i, &v) in g.data().iter().enumerate() {
                        let patch = i / (p * p * c);
                        let within = i % (p * p * c);
                        let (pr, pc) = (patch / pw, patch % pw);
                        let dr = within / (p * c);
                        let dc = (within / c) % p;
                        let ch = within % c;
                        let (r, col) = (pr * p + dr, pc * p + dc);
                        dst.data_mut()[(r * w + col) * c + ch] += v;
                    }
                    let _ = h;
                }
            }
        }
        Ok(Gradients { grads, graph: self })
    }
}

/// Gradients from one backward sweep, addressable by node id or leaf name.
pub struct Gradients<'g> {
    grads: Vec<Tensor>,
    graph: &'g Graph,
}

impl Gradients<'_> {
    pub fn of(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Gradients of all named leaves. Leaves not reached by the sweep keep
    /// their zero initialization.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, node) in self.graph.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(n) } = &node.op {
                out.insert(n.clone(), self.grads[i].clone());
            }
        }
        out
    }
}

fn softmax_forward(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Tensor::zeros_like(x);
    for r in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            max = max.max(x.at(r, c));
        }
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (x.at(r, c) - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..cols {
            out.set(r, c, out.at(r, c) / sum);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
