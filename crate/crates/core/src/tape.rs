//! Minimal reverse-mode differentiation over matrices.
//!
//! Operations append nodes to a [`Tape`] in evaluation order, so the node
//! index is already a topological order and the backward sweep simply
//! walks the nodes from last to first. Each node keeps only what its
//! vector-Jacobian product needs.
//!
//! The causal linear-attention numerator is a single node whose backward
//! rule is the two-sweep cumulative-sum kernel; its normalizer is built
//! from generic nodes ([`Tape::cumsum_rows`], [`Tape::row_dot`],
//! [`Tape::div_rows`]) and differentiated like anything else.

use crate::alloc_counter;
use crate::attention::{
    causal_linear_backward, causal_linear_forward, softmax_attention_backward,
    softmax_attention_forward_into, FeatureMap,
};
use crate::error::{shape_err, Error, Result};
use crate::matrix::{axpy, dot, matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    MatMulTn(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    FeatureMap(NodeId, FeatureMap),
    SoftmaxAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: Matrix,
    },
    CausalNumerator {
        qf: NodeId,
        kf: NodeId,
        v: NodeId,
    },
    CumsumRows(NodeId),
    ColSum(NodeId),
    RowDot(NodeId, NodeId),
    DivRows(NodeId, NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    Embedding {
        table: NodeId,
        tokens: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation. Not thread-safe by
/// construction (`&mut self` for every op); build one tape per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    causal_aux_bytes: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`; zeros when the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(self.shapes[id.0].0, self.shapes[id.0].1))
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, id: NodeId) -> Matrix {
        let (r, c) = self.shapes[id.0];
        self.grads[id.0].take().unwrap_or_else(|| Matrix::zeros(r, c))
    }

    /// Transient heap bytes used by each causal-numerator backward rule,
    /// in tape order. Zero unless the counting allocator is installed.
    pub fn causal_aux_bytes(&self) -> &[usize] {
        &self.causal_aux_bytes
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[NodeId]) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.val(a), self.val(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_nt(self.val(a), self.val(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b), &[a, b]))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_tn(self.val(a), self.val(b))?;
        Ok(self.push(v, Op::MatMulTn(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.val(a).add(self.val(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Adds a 1×C row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.val(x), self.val(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return shape_err("add_row", format!("bias {:?} for input {:?}", bv.shape(), xv.shape()));
        }
        let mut v = xv.clone();
        for i in 0..v.rows() {
            axpy(1.0, bv.row(0), v.row_mut(i));
        }
        Ok(self.push(v, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.val(x).map(|e| e + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.val(x).scale(c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.val(a).hadamard(self.val(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|e| e.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    /// Row-wise layer normalization with learned 1×C gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, gv, bv) = (self.val(x), self.val(gain), self.val(bias));
        let c = xv.cols();
        if gv.shape() != (1, c) || bv.shape() != (1, c) {
            return shape_err("layer_norm", "gain and bias must be 1×C");
        }
        let (xhat, rstd) = normalize_rows(xv, eps);
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * gv.get(0, j) + bv.get(0, j);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn feature_map(&mut self, x: NodeId, map: FeatureMap) -> Result<NodeId> {
        let v = map.apply_rows(self.val(x))?;
        Ok(self.push(v, Op::FeatureMap(x, map), &[x]))
    }

    /// Fused `softmax(QKᵀ/√D) V`; keeps the N×N probabilities for backward.
    pub fn softmax_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, causal: bool) -> Result<NodeId> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let mut out = Matrix::zeros(qv.rows(), vv.cols());
        let probs = softmax_attention_forward_into(qv, kv, vv, causal, &mut out)?;
        Ok(self.push(out, Op::SoftmaxAttention { q, k, v, probs }, &[q, k, v]))
    }

    /// Causal numerator `V̄_i = φ(Q_i)ᵀ Σ_{j≤i} φ(K_j) V_jᵀ` on already
    /// feature-mapped inputs.
    pub fn causal_numerator(&mut self, qf: NodeId, kf: NodeId, v: NodeId) -> Result<NodeId> {
        let r = causal_linear_forward(self.val(qf), self.val(kf), self.val(v))?;
        Ok(self.push(r.numerator, Op::CausalNumerator { qf, kf, v }, &[qf, kf, v]))
    }

    /// Row prefix sums: `out_i = Σ_{j≤i} x_j`.
    pub fn cumsum_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.val(x).clone();
        let c = v.cols();
        for i in 1..v.rows() {
            let (head, tail) = v.data_mut().split_at_mut(i * c);
            axpy(1.0, &head[(i - 1) * c..], &mut tail[..c]);
        }
        self.push(v, Op::CumsumRows(x), &[x])
    }

    /// Column sums as a 1×C row.
    pub fn col_sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let mut v = Matrix::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            axpy(1.0, xv.row(i), v.row_mut(0));
        }
        self.push(v, Op::ColSum(x), &[x])
    }

    /// Per-row dot products of two N×C matrices, as N×1.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return shape_err("row_dot", format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let v = Matrix::from_fn(av.rows(), 1, |i, _| dot(av.row(i), bv.row(i)));
        Ok(self.push(v, Op::RowDot(a, b), &[a, b]))
    }

    /// Divides row `i` of `num` (N×M) by `den[i]` (N×1).
    pub fn div_rows(&mut self, num: NodeId, den: NodeId) -> Result<NodeId> {
        let (nv, dv) = (self.val(num), self.val(den));
        if dv.shape() != (nv.rows(), 1) {
            return shape_err("div_rows", format!("denominator {:?} for {:?}", dv.shape(), nv.shape()));
        }
        let mut v = nv.clone();
        for i in 0..v.rows() {
            let d = dv.get(i, 0);
            v.row_mut(i).iter_mut().for_each(|x| *x /= d);
        }
        Ok(self.push(v, Op::DivRows(num, den), &[num, den]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.val(x).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.val(*p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Gathers rows of `table` (V×F) for each token.
    pub fn embedding(&mut self, table: NodeId, tokens: &[usize]) -> Result<NodeId> {
        let tv = self.val(table);
        if let Some(&bad) = tokens.iter().find(|&&t| t >= tv.rows()) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {}",
                tv.rows()
            )));
        }
        let mut v = Matrix::zeros(tokens.len(), tv.cols());
        for (i, &t) in tokens.iter().enumerate() {
            v.row_mut(i).copy_from_slice(tv.row(t));
        }
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            &[table],
        ))
    }

    /// Weighted mean cross-entropy `−Σ_i w_i log softmax(logits_i)[t_i] / Σ w`
    /// over rows with nonzero weight. Returns a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId> {
        let lv = self.val(logits);
        if targets.len() != lv.rows() || weights.len() != lv.rows() {
            return shape_err("cross_entropy", "one target and weight per row");
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Invalid(format!("target {bad} outside {} classes", lv.cols())));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invalid("cross_entropy needs a positive total weight".into()));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for i in 0..probs.rows() {
            let row = probs.row_mut(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            if weights[i] != 0.0 {
                loss -= weights[i] * (row[targets[i]] - lse);
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.val(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a 1×1 `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.val(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got a {}x{} node",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut causal_aux_bytes = Vec::new();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads, &mut causal_aux_bytes)?;
            grads[idx] = Some(g);
        }
        causal_aux_bytes.reverse();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            causal_aux_bytes,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
        causal_aux_bytes: &mut Vec<usize>,
    ) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.val(*b))?)?;
                }
                if needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.val(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, matmul(g, self.val(*b))?)?;
                }
                if needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.val(*a))?)?;
                }
            }
            Op::MatMulTn(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, matmul_nt(self.val(*b), g)?)?;
                }
                if needs(*b) {
                    self.accumulate(grads, *b, matmul(self.val(*a), g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if needs(*bias) {
                    self.accumulate(grads, *bias, column_sums(g))?;
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone())?,
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c))?,
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.val(*b))?)?;
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.val(*a))?)?;
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.val(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gain_v = self.val(*gain);
                if needs(*gain) {
                    self.accumulate(grads, *gain, column_sums(&g.hadamard(xhat)?))?;
                }
                if needs(*bias) {
                    self.accumulate(grads, *bias, column_sums(g))?;
                }
                if needs(*x) {
                    let c = xhat.cols() as f64;
                    let mut gx = Matrix::zeros(xhat.rows(), xhat.cols());
                    for i in 0..xhat.rows() {
                        let gh: Vec<f64> = g
                            .row(i)
                            .iter()
                            .zip(gain_v.row(0))
                            .map(|(a, b)| a * b)
                            .collect();
                        let xh = xhat.row(i);
                        let mean_g = gh.iter().sum::<f64>() / c;
                        let mean_gx = dot(&gh, xh) / c;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = rstd[i] * (gh[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::FeatureMap(x, map) => {
                let gx = map.backward_rows(self.val(*x), g)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxAttention { q, k, v, probs } => {
                let (dq, dk, dv) =
                    softmax_attention_backward(self.val(*q), self.val(*k), self.val(*v), probs, g)?;
                self.accumulate(grads, *q, dq)?;
                self.accumulate(grads, *k, dk)?;
                self.accumulate(grads, *v, dv)?;
            }
            Op::CausalNumerator { qf, kf, v } => {
                let (res, stats) = alloc_counter::measure(|| {
                    causal_linear_backward(self.val(*qf), self.val(*kf), self.val(*v), g)
                });
                let cg = res?;
                causal_aux_bytes.push(stats.peak_bytes - stats.retained_bytes);
                self.accumulate(grads, *qf, cg.qf)?;
                self.accumulate(grads, *kf, cg.kf)?;
                self.accumulate(grads, *v, cg.v)?;
            }
            Op::CumsumRows(x) => {
                // adjoint of a prefix sum is a suffix sum
                let mut gx = g.clone();
                let c = gx.cols();
                for i in (0..gx.rows().saturating_sub(1)).rev() {
                    let (head, tail) = gx.data_mut().split_at_mut((i + 1) * c);
                    axpy(1.0, &tail[..c], &mut head[i * c..]);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::ColSum(x) => {
                let rows = self.val(*x).rows();
                let gx = Matrix::from_fn(rows, g.cols(), |_, j| g.get(0, j));
                self.accumulate(grads, *x, gx)?;
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if needs(*a) {
                    self.accumulate(grads, *a, Matrix::from_fn(av.rows(), av.cols(), |i, j| g.get(i, 0) * bv.get(i, j)))?;
                }
                if needs(*b) {
                    self.accumulate(grads, *b, Matrix::from_fn(bv.rows(), bv.cols(), |i, j| g.get(i, 0) * av.get(i, j)))?;
                }
            }
            Op::DivRows(num, den) => {
                let (nv, dv) = (self.val(*num), self.val(*den));
                if needs(*num) {
                    let gn = Matrix::from_fn(nv.rows(), nv.cols(), |i, j| g.get(i, j) / dv.get(i, 0));
                    self.accumulate(grads, *num, gn)?;
                }
                if needs(*den) {
                    let gd = Matrix::from_fn(nv.rows(), 1, |i, _| {
                        let d = dv.get(i, 0);
                        -dot(g.row(i), nv.row(i)) / (d * d)
                    });
                    self.accumulate(grads, *den, gd)?;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.val(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    if needs(*p) {
                        self.accumulate(grads, *p, g.slice_cols(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::Embedding { table, tokens } => {
                let tv = self.val(*table);
                let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                for (i, &t) in tokens.iter().enumerate() {
                    axpy(1.0, g.row(i), gt.row_mut(t));
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g.get(0, 0);
                let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = gl.row_mut(i);
                    for (o, &p) in row.iter_mut().zip(probs.row(i)) {
                        *o = scale * w * p;
                    }
                    row[t] -= scale * w;
                }
                self.accumulate(grads, *logits, gl)?;
            }
            Op::Sum(x) => {
                let (r, c) = self.val(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)))?;
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        axpy(1.0, g.row(i), out.row_mut(0));
    }
    out
}

/// `(x − mean) / √(var + eps)` per row, plus the per-row reciprocal std.
pub fn normalize_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let c = x.cols() as f64;
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let r = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * r);
        rstd.push(r);
    }
    (out, rstd)
}
