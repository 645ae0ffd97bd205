//! Define-by-run compute graph. Each op evaluates eagerly when added, so
//! node creation order is already a topological order; `backward` walks it
//! in reverse once and accumulates gradients across every use site of a
//! node. One graph serves exactly one forward/backward step.

use super::linalg;
use crate::error::{Error, Result};
use crate::masking::{threshold_topk_values, CombineMode, Sparsity};
use crate::autodiff::Tensor;

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Relu(NodeId),
    Gelu(NodeId),
    SoftmaxLastDim(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    EmbeddingLookup { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    MeanPool { x: NodeId, group: usize },
    SumAll(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    /// Forward thresholds scores to a binary mask; backward passes the
    /// upstream gradient through unchanged (straight-through).
    BinarizeTopK { scores: NodeId },
    /// Merge of two binary masks; backward routes the upstream gradient
    /// unchanged to both operands (straight-through through the combiner),
    /// so only the operand ids need to be kept.
    CombineMasks { a: NodeId, b: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    /// Reduction ops accumulate in f64; the pre-cast value is kept so
    /// numerical tools can read the loss above f32 resolution.
    scalar_f64: Option<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::invalid(op, format!("expected rank-2 tensor, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, requires_grad, scalar_f64: None });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    /// Scalar value at the precision it was accumulated at: the f64 sum for
    /// reduction nodes, the f32 value otherwise.
    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].scalar_f64.unwrap_or(self.nodes[id].value[0] as f64)
    }

    /// Gradient of a node after `backward`; None if the node was not reached
    /// or does not require gradients.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id].as_deref()
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn leaf_parts(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, shape, value, requires_grad)
    }

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = dims2(&self.nodes[a].shape, "matmul")?;
        let (kb, n) = dims2(&self.nodes[b].shape, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let v = linalg::matmul(&self.nodes[a].value, &self.nodes[b].value, m, ka, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], v, rg))
    }

    /// a(m,k) * b(n,k)^T -> (m,n)
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = dims2(&self.nodes[a].shape, "matmul_nt")?;
        let (n, kb) = dims2(&self.nodes[b].shape, "matmul_nt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let v = linalg::matmul_nt(&self.nodes[a].value, &self.nodes[b].value, m, ka, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulNT(a, b), vec![m, n], v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("add", a, b)?;
        let v: Vec<f32> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add(a, b), shape, v, rg))
    }

    /// x(r,d) + bias(d), broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, d) = dims2(&self.nodes[x].shape, "add_bias")?;
        if self.nodes[bias].shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x].shape.clone(),
                rhs: self.nodes[bias].shape.clone(),
            });
        }
        let bv = &self.nodes[bias].value;
        let mut v = Vec::with_capacity(r * d);
        for row in self.nodes[x].value.chunks_exact(d) {
            for j in 0..d {
                v.push(row[j] + bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddBias(x, bias), vec![r, d], v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("mul", a, b)?;
        let v: Vec<f32> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Mul(a, b), shape, v, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let v: Vec<f32> = self.nodes[a].value.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Scale(a, c), shape, v, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v: Vec<f32> = self.nodes[a].value.iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Relu(a), shape, v, rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v: Vec<f32> = self.nodes[a].value.iter().map(|&x| gelu_f(x as f64) as f32).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Gelu(a), shape, v, rg))
    }

    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
        let av = &self.nodes[a].value;
        if av.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut v = Vec::with_capacity(av.len());
        for row in av.chunks_exact(d) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            v.extend(exps.iter().map(|e| (e / sum) as f32));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxLastDim(a), shape, v, rg))
    }

    /// Row-wise layer norm with affine rescale; epsilon fixed at 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (r, d) = dims2(&self.nodes[x].shape, "layer_norm")?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[p].shape != [d] {
                return Err(Error::invalid(
                    "layer_norm",
                    format!("{name} shape {:?} does not match width {d}", self.nodes[p].shape),
                ));
            }
        }
        let xv = &self.nodes[x].value;
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "layer_norm" });
        }
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        let mut v = Vec::with_capacity(r * d);
        for row in xv.chunks_exact(d) {
            let (mu, sigma) = row_moments(row);
            for j in 0..d {
                let xhat = (row[j] as f64 - mu) / sigma;
                v.push((xhat * gv[j] as f64 + bv[j] as f64) as f32);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, vec![r, d], v, rg))
    }

    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, d) = dims2(&self.nodes[table].shape, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(
                "embedding_lookup",
                format!("id {bad} out of range for table with {vocab} rows"),
            ));
        }
        let tv = &self.nodes[table].value;
        let mut v = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            v.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::EmbeddingLookup { table, ids: ids.to_vec() },
            vec![ids.len(), d],
            v,
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "empty input list"));
        }
        let (_, d) = dims2(&self.nodes[parts[0]].shape, "concat_rows")?;
        let mut rows = 0;
        let mut v = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, dp) = dims2(&self.nodes[p].shape, "concat_rows")?;
            if dp != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0]].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            rows += r;
            v.extend_from_slice(&self.nodes[p].value);
            rg |= self.rg(p);
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, d], v, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "empty input list"));
        }
        let (r, _) = dims2(&self.nodes[parts[0]].shape, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let (rp, dp) = dims2(&self.nodes[p].shape, "concat_cols")?;
            if rp != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0]].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            widths.push(dp);
            rg |= self.rg(p);
        }
        let d: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(r * d);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = &self.nodes[p].value;
                v.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![r, d], v, rg))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, d) = dims2(&self.nodes[x].shape, "slice_rows")?;
        if start + len > r {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{} out of range for {r} rows", start + len),
            ));
        }
        let v = self.nodes[x].value[start * d..(start + len) * d].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows { x, start, len }, vec![len, d], v, rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, d) = dims2(&self.nodes[x].shape, "slice_cols")?;
        if start + len > d {
            return Err(Error::invalid(
                "slice_cols",
                format!("cols {start}..{} out of range for width {d}", start + len),
            ));
        }
        let xv = &self.nodes[x].value;
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&xv[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start, len }, vec![r, len], v, rg))
    }

    /// Mean over consecutive groups of `group` rows; (g*b, d) -> (b, d).
    pub fn mean_pool(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (r, d) = dims2(&self.nodes[x].shape, "mean_pool")?;
        if group == 0 || r % group != 0 {
            return Err(Error::invalid(
                "mean_pool",
                format!("group {group} does not divide {r} rows"),
            ));
        }
        let xv = &self.nodes[x].value;
        let out_rows = r / group;
        let mut v = Vec::with_capacity(out_rows * d);
        for b in 0..out_rows {
            for j in 0..d {
                let mut acc = 0.0f64;
                for i in 0..group {
                    acc += xv[(b * group + i) * d + j] as f64;
                }
                v.push((acc / group as f64) as f32);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::MeanPool { x, group }, vec![out_rows, d], v, rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let acc: f64 = self.nodes[x].value.iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        let id = self.push(Op::SumAll(x), vec![1], vec![acc as f32], rg);
        self.nodes[id].scalar_f64 = Some(acc);
        Ok(id)
    }

    /// Mean negative log-likelihood over rows of logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (r, c) = dims2(&self.nodes[logits].shape, "cross_entropy")?;
        if labels.len() != r {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), r),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let lv = &self.nodes[logits].value;
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        let mut acc = 0.0f64;
        for (row, &label) in lv.chunks_exact(c).zip(labels) {
            acc += row_nll(row, label);
        }
        let rg = self.rg(logits);
        let mean = acc / r as f64;
        let id = self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            vec![1],
            vec![mean as f32],
            rg,
        );
        self.nodes[id].scalar_f64 = Some(mean);
        Ok(id)
    }

    /// Binary top-k threshold with a straight-through backward. The scores
    /// node must be a leaf; one mask per score tensor per step.
    pub fn binarize_topk(&mut self, scores: NodeId, k: Sparsity) -> Result<NodeId> {
        if !matches!(self.nodes[scores].op, Op::Leaf) {
            return Err(Error::invalid("binarize_topk", "scores must be a leaf node"));
        }
        let shape = self.nodes[scores].shape.clone();
        let mask = threshold_topk_values("binarize", &shape, &self.nodes[scores].value, k)?;
        let v = mask.to_f32_vec();
        let rg = self.rg(scores);
        Ok(self.push(Op::BinarizeTopK { scores }, shape, v, rg))
    }

    /// Merge two binary masks in-graph; backward is straight-through to both.
    pub fn combine_masks(&mut self, a: NodeId, b: NodeId, mode: CombineMode) -> Result<NodeId> {
        self.binary_shapes("combine_masks", a, b)?;
        for &p in &[a, b] {
            if self.nodes[p].value.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid("combine_masks", "inputs must be binary"));
            }
        }
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let v: Vec<f32> = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| {
                let (x, y) = (x != 0.0, y != 0.0);
                let bit = match mode {
                    CombineMode::Or => x || y,
                    CombineMode::And => x && y,
                    CombineMode::Add => x || y, // saturating sum on binary inputs
                };
                if bit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::CombineMasks { a, b }, shape, v, rg))
    }

    /// Reverse pass from a scalar loss node. Populates gradients for every
    /// reachable node with `requires_grad`; rejects a second call on the
    /// same graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        self.consumed = true;
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss].shape),
            ));
        }
        if !self.nodes[loss].requires_grad {
            return Err(Error::invalid("backward", "loss does not depend on any parameter"));
        }
        self.grads[loss] = Some(vec![1.0]);
        for id in (0..self.nodes.len()).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            let contributions = self.backward_node(id, &g);
            self.grads[id] = Some(g);
            for (input, contrib) in contributions {
                self.accumulate(input, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: Vec<f32>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(&contrib) {
                    *dst += src;
                }
            }
            none => *none = Some(contrib),
        }
    }

    fn backward_node(&self, id: NodeId, g: &[f32]) -> Vec<(NodeId, Vec<f32>)> {
        let node = &self.nodes[id];
        let mut out: Vec<(NodeId, Vec<f32>)> = Vec::new();
        let push = |out: &mut Vec<(NodeId, Vec<f32>)>, input: NodeId, v: Vec<f32>| {
            if self.nodes[input].requires_grad {
                out.push((input, v));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.rg(*a) {
                    let da = linalg::matmul_nt(g, &self.nodes[*b].value, m, n, k);
                    push(&mut out, *a, da);
                }
                if self.rg(*b) {
                    let db = linalg::matmul_tn(&self.nodes[*a].value, g, m, k, n);
                    push(&mut out, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                if self.rg(*a) {
                    let da = linalg::matmul(g, &self.nodes[*b].value, m, n, k);
                    push(&mut out, *a, da);
                }
                if self.rg(*b) {
                    let db = linalg::matmul_tn(g, &self.nodes[*a].value, m, n, k);
                    push(&mut out, *b, db);
                }
            }
            Op::Add(a, b) => {
                push(&mut out, *a, g.to_vec());
                push(&mut out, *b, g.to_vec());
            }
            Op::AddBias(x, bias) => {
                push(&mut out, *x, g.to_vec());
                if self.rg(*bias) {
                    let d = self.nodes[*bias].shape[0];
                    let mut db = vec![0.0f64; d];
                    for row in g.chunks_exact(d) {
                        for j in 0..d {
                            db[j] += row[j] as f64;
                        }
                    }
                    push(&mut out, *bias, db.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = g.iter().zip(&self.nodes[*b].value).map(|(g, y)| g * y).collect();
                    push(&mut out, *a, da);
                }
                if self.rg(*b) {
                    let db = g.iter().zip(&self.nodes[*a].value).map(|(g, x)| g * x).collect();
                    push(&mut out, *b, db);
                }
            }
            Op::Scale(a, c) => {
                push(&mut out, *a, g.iter().map(|g| g * c).collect());
            }
            Op::Relu(a) => {
                // Subgradient 0 at exactly 0.
                let da = g
                    .iter()
                    .zip(&self.nodes[*a].value)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                push(&mut out, *a, da);
            }
            Op::Gelu(a) => {
                let da = g
                    .iter()
                    .zip(&self.nodes[*a].value)
                    .map(|(g, &x)| (*g as f64 * gelu_df(x as f64)) as f32)
                    .collect();
                push(&mut out, *a, da);
            }
            Op::SoftmaxLastDim(a) => {
                let d = *node.shape.last().unwrap();
                let mut da = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks_exact(d).zip(node.value.chunks_exact(d)) {
                    let dot: f64 =
                        grow.iter().zip(yrow).map(|(&g, &y)| g as f64 * y as f64).sum();
                    for j in 0..d {
                        da.push((yrow[j] as f64 * (grow[j] as f64 - dot)) as f32);
                    }
                }
                push(&mut out, *a, da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = self.nodes[*gamma].shape[0];
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let rows = xv.len() / d;
                let mut dx = vec![0.0f32; xv.len()];
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                for i in 0..rows {
                    let row = &xv[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let (mu, sigma) = row_moments(row);
                    let xhat: Vec<f64> =
                        row.iter().map(|&v| (v as f64 - mu) / sigma).collect();
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .zip(gv)
                        .map(|(&g, &gm)| g as f64 * gm as f64)
                        .collect();
                    let m1: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = ((dxhat[j] - m1 - xhat[j] * m2) / sigma) as f32;
                        dgamma[j] += grow[j] as f64 * xhat[j];
                        dbeta[j] += grow[j] as f64;
                    }
                }
                push(&mut out, *x, dx);
                if self.rg(*gamma) {
                    push(&mut out, *gamma, dgamma.into_iter().map(|v| v as f32).collect());
                }
                if self.rg(*beta) {
                    push(&mut out, *beta, dbeta.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                if self.rg(*table) {
                    let d = node.shape[1];
                    let mut dt = vec![0.0f32; self.nodes[*table].value.len()];
                    for (row, &i) in g.chunks_exact(d).zip(ids) {
                        for j in 0..d {
                            dt[i * d + j] += row[j];
                        }
                    }
                    push(&mut out, *table, dt);
                }
            }
            Op::ConcatRows(parts) => {
                let d = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p].shape[0];
                    let slice = g[offset * d..(offset + r) * d].to_vec();
                    push(&mut out, p, slice);
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    push(&mut out, p, dp);
                    offset += w;
                }
            }
            Op::SliceRows { x, start, len } => {
                let d = node.shape[1];
                let mut dx = vec![0.0f32; self.nodes[*x].value.len()];
                dx[start * d..(start + len) * d].copy_from_slice(g);
                push(&mut out, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let (_, full) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let rows = node.shape[0];
                let mut dx = vec![0.0f32; self.nodes[*x].value.len()];
                for i in 0..rows {
                    dx[i * full + start..i * full + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                push(&mut out, *x, dx);
            }
            Op::MeanPool { x, group } => {
                let d = node.shape[1];
                let inv = 1.0 / *group as f64;
                let mut dx = Vec::with_capacity(self.nodes[*x].value.len());
                for grow in g.chunks_exact(d) {
                    for _ in 0..*group {
                        dx.extend(grow.iter().map(|&v| (v as f64 * inv) as f32));
                    }
                }
                push(&mut out, *x, dx);
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                push(&mut out, *x, vec![g0; self.nodes[*x].value.len()]);
            }
            Op::CrossEntropy { logits, labels } => {
                let c = self.nodes[*logits].shape[1];
                let lv = &self.nodes[*logits].value;
                let rows = labels.len();
                let scale = g[0] as f64 / rows as f64;
                let mut dl = Vec::with_capacity(lv.len());
                for (row, &label) in lv.chunks_exact(c).zip(labels) {
                    let probs = row_softmax(row);
                    for (j, p) in probs.into_iter().enumerate() {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dl.push(((p - onehot) * scale) as f32);
                    }
                }
                push(&mut out, *logits, dl);
            }
            Op::BinarizeTopK { scores } => {
                // Straight-through: upstream gradient passes bit-for-bit.
                push(&mut out, *scores, g.to_vec());
            }
            Op::CombineMasks { a, b } => {
                push(&mut out, *a, g.to_vec());
                push(&mut out, *b, g.to_vec());
            }
        }
        out
    }
}

fn row_moments(row: &[f32]) -> (f64, f64) {
    let d = row.len() as f64;
    let mu: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var: f64 = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / d;
    (mu, (var + LAYER_NORM_EPS).sqrt())
}

fn row_softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn row_nll(row: &[f32], label: usize) -> f64 {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse: f64 =
        m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
    lse - row[label] as f64
}

const GELU_C0: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}
