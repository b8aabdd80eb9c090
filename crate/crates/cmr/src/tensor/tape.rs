use crate::error::{CmrError, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Backward rule for one recorded operation. Variants cache whatever the
/// reverse pass needs (argmax indices, constants) so inputs are not
/// recomputed.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddN { parts: Vec<NodeId> },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    MulConst { x: NodeId, consts: Vec<f64> },
    Relu { x: NodeId },
    SoftmaxCols { x: NodeId },
    LayerNormCols { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Linear { w: NodeId, x: NodeId, b: NodeId },
    Conv2d { input: NodeId, kernels: NodeId, bias: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize },
    GatherCols { x: NodeId, indices: Vec<usize> },
    Reshape { x: NodeId },
    Outer { u: NodeId, v: NodeId },
    RowMax { x: NodeId, argmax: Vec<Option<usize>> },
    SumAll { x: NodeId },
    CrossEntropy { logits: NodeId, label: usize },
    SigmoidBce { logit: NodeId, target: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records operations in topological order; `backward` replays them once in
/// reverse. A tape is confined to one thread of execution.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.push(t.values().to_vec(), t.shape().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id].shape.clone(), self.nodes[id].values.clone())
            .expect("node holds a consistent tensor")
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        let id = self.nodes.len();
        self.nodes.push(Node { values, shape, requires_grad, grad: None, op });
        id
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id].shape;
        if s.len() != 2 {
            return Err(CmrError::InvalidInput { op, reason: format!("expected 2-d tensor, got {s:?}") });
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(CmrError::DimensionMismatch {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.nodes[a].values, &self.nodes[b].values, m, k, n, &mut out);
        Ok(self.push(out, vec![m, n], self.req(&[a, b]), Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let v = &self.nodes[x].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(out, vec![c, r], self.req(&[x]), Op::Transpose { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(CmrError::DimensionMismatch {
                op: "add",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(out, shape, self.req(&[a, b]), Op::Add { a, b }))
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(CmrError::InvalidInput {
            op: "add_n",
            reason: "empty operand list".into(),
        })?;
        let shape = self.nodes[first].shape.clone();
        for &p in parts {
            if self.nodes[p].shape != shape {
                return Err(CmrError::DimensionMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: self.nodes[p].shape.clone(),
                });
            }
        }
        let mut out = vec![0.0; self.nodes[first].values.len()];
        for &p in parts {
            for (o, v) in out.iter_mut().zip(&self.nodes[p].values) {
                *o += v;
            }
        }
        Ok(self.push(out, shape, self.req(parts), Op::AddN { parts: parts.to_vec() }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(CmrError::DimensionMismatch {
                op: "mul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(out, shape, self.req(&[a, b]), Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x].values.iter().map(|v| v * c).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(out, shape, self.req(&[x]), Op::Scale { x, c })
    }

    /// Adds a constant array (not differentiated). Used for additive masks.
    pub fn add_const(&mut self, x: NodeId, consts: &[f64]) -> Result<NodeId> {
        if self.nodes[x].values.len() != consts.len() {
            return Err(CmrError::InvalidInput {
                op: "add_const",
                reason: format!("{} constants for {} elements", consts.len(), self.nodes[x].values.len()),
            });
        }
        let out: Vec<f64> = self.nodes[x].values.iter().zip(consts).map(|(v, c)| v + c).collect();
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(out, shape, self.req(&[x]), Op::AddConst { x }))
    }

    /// Elementwise product with a constant array (not differentiated). Used
    /// to zero out masked rows or columns.
    pub fn mul_const(&mut self, x: NodeId, consts: &[f64]) -> Result<NodeId> {
        if self.nodes[x].values.len() != consts.len() {
            return Err(CmrError::InvalidInput {
                op: "mul_const",
                reason: format!("{} constants for {} elements", consts.len(), self.nodes[x].values.len()),
            });
        }
        let out: Vec<f64> = self.nodes[x].values.iter().zip(consts).map(|(v, c)| v * c).collect();
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(out, shape, self.req(&[x]), Op::MulConst { x, consts: consts.to_vec() }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x].values.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(out, shape, self.req(&[x]), Op::Relu { x })
    }

    /// Column-wise softmax of a 2-d tensor, computed with max subtraction.
    /// Every output column sums to 1.
    pub fn softmax_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "softmax_cols")?;
        let v = &self.nodes[x].values;
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let mut m = f64::NEG_INFINITY;
            for i in 0..r {
                m = m.max(v[i * c + j]);
            }
            let mut z = 0.0;
            for i in 0..r {
                let e = (v[i * c + j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for i in 0..r {
                out[i * c + j] /= z;
            }
        }
        Ok(self.push(out, vec![r, c], self.req(&[x]), Op::SoftmaxCols { x }))
    }

    /// Per-column layer normalization of `x: [d, n]` with learned
    /// `gain, bias: [d]`. Each column is shifted to mean zero and scaled to
    /// unit variance before gain and bias are applied.
    pub fn layer_norm_cols(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-8;
        let (d, n) = self.dims2(x, "layer_norm")?;
        for (id, name) in [(gain, "gain"), (bias, "bias")] {
            if self.nodes[id].shape != [d] {
                return Err(CmrError::InvalidInput {
                    op: "layer_norm",
                    reason: format!("{name} shape {:?} does not match feature dim {d}", self.nodes[id].shape),
                });
            }
        }
        let v = &self.nodes[x].values;
        let g = &self.nodes[gain].values;
        let b = &self.nodes[bias].values;
        let mut out = vec![0.0; d * n];
        for j in 0..n {
            let mut mean = 0.0;
            for i in 0..d {
                mean += v[i * n + j];
            }
            mean /= d as f64;
            let mut var = 0.0;
            for i in 0..d {
                let dlt = v[i * n + j] - mean;
                var += dlt * dlt;
            }
            var /= d as f64;
            let inv_std = 1.0 / (var + EPS).sqrt();
            for i in 0..d {
                out[i * n + j] = (v[i * n + j] - mean) * inv_std * g[i] + b[i];
            }
        }
        Ok(self.push(out, vec![d, n], self.req(&[x, gain, bias]), Op::LayerNormCols { x, gain, bias, eps: EPS }))
    }

    /// Affine map `w·x + b` with `w: [o, i]`, `x: [i, n]`, `b: [o]`; the bias
    /// is broadcast across columns.
    pub fn linear(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (o, i) = self.dims2(w, "linear")?;
        let (i2, n) = self.dims2(x, "linear")?;
        if i != i2 {
            return Err(CmrError::DimensionMismatch {
                op: "linear",
                lhs: self.nodes[w].shape.clone(),
                rhs: self.nodes[x].shape.clone(),
            });
        }
        if self.nodes[b].shape != [o] {
            return Err(CmrError::InvalidInput {
                op: "linear",
                reason: format!("bias shape {:?} does not match output dim {o}", self.nodes[b].shape),
            });
        }
        let mut out = vec![0.0; o * n];
        matmul_raw(&self.nodes[w].values, &self.nodes[x].values, o, i, n, &mut out);
        for r in 0..o {
            let bv = self.nodes[b].values[r];
            for j in 0..n {
                out[r * n + j] += bv;
            }
        }
        Ok(self.push(out, vec![o, n], self.req(&[w, x, b]), Op::Linear { w, x, b }))
    }

    /// Valid cross-correlation of `input: [c_in, h, w]` with
    /// `kernels: [c_out, c_in, kh, kw]` plus a per-channel bias.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.nodes[input].shape.clone();
        let kshape = self.nodes[kernels].shape.clone();
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(CmrError::InvalidInput {
                op: "conv2d",
                reason: format!("expected input [c,h,w] and kernels [co,ci,kh,kw], got {ishape:?} and {kshape:?}"),
            });
        }
        let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (co, ci2, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if ci != ci2 {
            return Err(CmrError::DimensionMismatch { op: "conv2d", lhs: ishape, rhs: kshape });
        }
        if kh > h || kw > w {
            return Err(CmrError::DimensionMismatch { op: "conv2d", lhs: ishape, rhs: kshape });
        }
        if self.nodes[bias].shape != [co] {
            return Err(CmrError::InvalidInput {
                op: "conv2d",
                reason: format!("bias shape {:?} does not match {co} output channels", self.nodes[bias].shape),
            });
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let iv = &self.nodes[input].values;
        let kv = &self.nodes[kernels].values;
        let bv = &self.nodes[bias].values;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bv[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += iv[c * h * w + (y + ky) * w + (x + kx)]
                                    * kv[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        Ok(self.push(out, vec![co, oh, ow], self.req(&[input, kernels, bias]), Op::Conv2d { input, kernels, bias }))
    }

    /// 2x2 max pooling with stride 2; ragged edge windows shrink. The
    /// backward pass routes each output gradient to the argmax element,
    /// first in row-major order on ties.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.nodes[input].shape.clone();
        if ishape.len() != 3 {
            return Err(CmrError::InvalidInput {
                op: "maxpool2",
                reason: format!("expected input [c,h,w], got {ishape:?}"),
            });
        }
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let v = &self.nodes[input].values;
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for x in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = ch * h * w + y * w + x;
                            if v[idx] > best {
                                best = v[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = best;
                    argmax[(ch * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
        Ok(self.push(out, vec![c, oh, ow], self.req(&[input]), Op::MaxPool2 { input, argmax }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(CmrError::InvalidInput {
            op: "concat_cols",
            reason: "empty operand list".into(),
        })?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(CmrError::DimensionMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[first].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let pc = self.nodes[p].shape[1];
            for i in 0..r {
                for j in 0..pc {
                    out[i * total + off + j] = self.nodes[p].values[i * pc + j];
                }
            }
            off += pc;
        }
        Ok(self.push(out, vec![r, total], self.req(parts), Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(CmrError::InvalidInput {
            op: "concat_rows",
            reason: "empty operand list".into(),
        })?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(CmrError::DimensionMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[first].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            total += pr;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p].values);
        }
        Ok(self.push(out, vec![total, c], self.req(parts), Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(CmrError::InvalidInput {
                op: "slice_cols",
                reason: format!("columns {start}..{} out of range for width {c}", start + len),
            });
        }
        let v = &self.nodes[x].values;
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&v[i * c + start..i * c + start + len]);
        }
        Ok(self.push(out, vec![r, len], self.req(&[x]), Op::SliceCols { x, start }))
    }

    /// Output column k is column `indices[k]` of `x`. Backward scatter-adds,
    /// so repeated indices accumulate.
    pub fn gather_cols(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "gather_cols")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(CmrError::InvalidInput {
                op: "gather_cols",
                reason: format!("column index {bad} out of range for width {c}"),
            });
        }
        let k = indices.len();
        let v = &self.nodes[x].values;
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            for (j, &src) in indices.iter().enumerate() {
                out[i * k + j] = v[i * c + src];
            }
        }
        Ok(self.push(out, vec![r, k], self.req(&[x]), Op::GatherCols { x, indices: indices.to_vec() }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].values.len() {
            return Err(CmrError::InvalidInput {
                op: "reshape",
                reason: format!("cannot reshape {:?} into {shape:?}", self.nodes[x].shape),
            });
        }
        let values = self.nodes[x].values.clone();
        Ok(self.push(values, shape, self.req(&[x]), Op::Reshape { x }))
    }

    /// Flattens to a single column, `[numel, 1]`.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let numel = self.nodes[x].values.len();
        self.reshape(x, vec![numel, 1]).expect("flatten preserves element count")
    }

    /// Outer product of two vectors: `out[i][j] = u[i] * v[j]`.
    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        for id in [u, v] {
            if self.nodes[id].shape.len() != 1 {
                return Err(CmrError::InvalidInput {
                    op: "outer_product",
                    reason: format!("expected vectors, got {:?}", self.nodes[id].shape),
                });
            }
        }
        let m = self.nodes[u].values.len();
        let n = self.nodes[v].values.len();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = self.nodes[u].values[i] * self.nodes[v].values[j];
            }
        }
        Ok(self.push(out, vec![m, n], self.req(&[u, v]), Op::Outer { u, v }))
    }

    /// Row-wise maximum over the columns marked valid; rows see the first
    /// maximal valid column on ties. Rows with no valid column yield 0 and
    /// receive no gradient.
    pub fn row_max(&mut self, x: NodeId, valid_cols: &[bool]) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "row_max")?;
        if valid_cols.len() != c {
            return Err(CmrError::InvalidInput {
                op: "row_max",
                reason: format!("{} column flags for width {c}", valid_cols.len()),
            });
        }
        let v = &self.nodes[x].values;
        let mut out = vec![0.0; r];
        let mut argmax = vec![None; r];
        for i in 0..r {
            let mut best = f64::NEG_INFINITY;
            let mut best_j = None;
            for j in 0..c {
                if valid_cols[j] && v[i * c + j] > best {
                    best = v[i * c + j];
                    best_j = Some(j);
                }
            }
            if let Some(j) = best_j {
                out[i] = v[i * c + j];
                argmax[i] = Some(j);
            }
        }
        Ok(self.push(out, vec![r], self.req(&[x]), Op::RowMax { x, argmax }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].values.iter().sum();
        self.push(vec![s], vec![1], self.req(&[x]), Op::SumAll { x })
    }

    /// Multi-class cross-entropy of a single logit column against an integer
    /// label, computed through a stable log-softmax.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let shape = &self.nodes[logits].shape;
        let c = self.nodes[logits].values.len();
        let column_like = shape.len() == 1 || (shape.len() == 2 && shape[1] == 1);
        if !column_like {
            return Err(CmrError::InvalidInput {
                op: "cross_entropy",
                reason: format!("expected a logit column, got {shape:?}"),
            });
        }
        if label >= c {
            return Err(CmrError::InvalidInput {
                op: "cross_entropy",
                reason: format!("label {label} out of range for {c} classes"),
            });
        }
        let v = &self.nodes[logits].values;
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let loss = lse - v[label];
        Ok(self.push(vec![loss], vec![1], self.req(&[logits]), Op::CrossEntropy { logits, label }))
    }

    /// Binary cross-entropy on a sigmoid over one logit, in the numerically
    /// stable max(x,0) - x*y + ln(1 + exp(-|x|)) form.
    pub fn sigmoid_bce(&mut self, logit: NodeId, target: u8) -> Result<NodeId> {
        if self.nodes[logit].values.len() != 1 {
            return Err(CmrError::InvalidInput {
                op: "sigmoid_bce",
                reason: format!("expected a single logit, got shape {:?}", self.nodes[logit].shape),
            });
        }
        if target > 1 {
            return Err(CmrError::InvalidInput {
                op: "sigmoid_bce",
                reason: format!("binary label must be 0 or 1, got {target}"),
            });
        }
        let x = self.nodes[logit].values[0];
        let y = f64::from(target);
        let loss = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        Ok(self.push(vec![loss], vec![1], self.req(&[logit]), Op::SigmoidBce { logit, target: y }))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn ensure_grad(&mut self, id: NodeId) {
        if self.nodes[id].grad.is_none() {
            self.nodes[id].grad = Some(vec![0.0; self.nodes[id].values.len()]);
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        self.ensure_grad(id);
        let g = self.nodes[id].grad.as_mut().expect("grad allocated");
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    /// Reverse pass from a scalar `loss`. Visits each recorded operation
    /// exactly once, in reverse order, summing gradients where a tensor is
    /// used more than once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].values.len() != 1 {
            return Err(CmrError::InvalidInput {
                op: "backward",
                reason: format!("loss must be scalar, got shape {:?}", self.nodes[loss].shape),
            });
        }
        if !self.nodes[loss].requires_grad {
            return Ok(());
        }
        self.ensure_grad(loss);
        self.nodes[loss].grad.as_mut().expect("grad allocated")[0] = 1.0;

        for i in (0..=loss).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}

                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    if self.nodes[a].requires_grad {
                        // dA = G · Bᵀ
                        let bv = &self.nodes[b].values;
                        let mut bt = vec![0.0; n * k];
                        for p in 0..k {
                            for j in 0..n {
                                bt[j * k + p] = bv[p * n + j];
                            }
                        }
                        let mut da = vec![0.0; m * k];
                        matmul_raw(&g, &bt, m, n, k, &mut da);
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = Aᵀ · G
                        let av = &self.nodes[a].values;
                        let mut at = vec![0.0; k * m];
                        for i2 in 0..m {
                            for p in 0..k {
                                at[p * m + i2] = av[i2 * k + p];
                            }
                        }
                        let mut db = vec![0.0; k * n];
                        matmul_raw(&at, &g, k, m, n, &mut db);
                        self.accumulate(b, &db);
                    }
                }

                Op::Transpose { x } => {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut dx = vec![0.0; r * c];
                    for y in 0..r {
                        for z in 0..c {
                            dx[z * r + y] = g[y * c + z];
                        }
                    }
                    self.accumulate(x, &dx);
                }

                Op::Add { a, b } => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }

                Op::AddN { parts } => {
                    for p in parts {
                        self.accumulate(p, &g);
                    }
                }

                Op::Mul { a, b } => {
                    if self.nodes[a].requires_grad {
                        let da: Vec<f64> = g.iter().zip(&self.nodes[b].values).map(|(gv, bv)| gv * bv).collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let db: Vec<f64> = g.iter().zip(&self.nodes[a].values).map(|(gv, av)| gv * av).collect();
                        self.accumulate(b, &db);
                    }
                }

                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                    self.accumulate(x, &dx);
                }

                Op::AddConst { x } => {
                    self.accumulate(x, &g);
                }

                Op::MulConst { x, consts } => {
                    let dx: Vec<f64> = g.iter().zip(&consts).map(|(gv, c)| gv * c).collect();
                    self.accumulate(x, &dx);
                }

                Op::Relu { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x].values)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }

                Op::SoftmaxCols { x } => {
                    // d s_i = s_i (g_i - Σ_j g_j s_j), per column
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let s = &self.nodes[i].values;
                    let mut dx = vec![0.0; r * c];
                    for j in 0..c {
                        let mut dot = 0.0;
                        for y in 0..r {
                            dot += g[y * c + j] * s[y * c + j];
                        }
                        for y in 0..r {
                            dx[y * c + j] = s[y * c + j] * (g[y * c + j] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }

                Op::LayerNormCols { x, gain, bias, eps } => {
                    let (d, n) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let xv = self.nodes[x].values.clone();
                    let gv = self.nodes[gain].values.clone();
                    let mut dx = vec![0.0; d * n];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let df = d as f64;
                    for j in 0..n {
                        let mut mean = 0.0;
                        for y in 0..d {
                            mean += xv[y * n + j];
                        }
                        mean /= df;
                        let mut var = 0.0;
                        for y in 0..d {
                            let dlt = xv[y * n + j] - mean;
                            var += dlt * dlt;
                        }
                        var /= df;
                        let inv_std = 1.0 / (var + eps).sqrt();

                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; d];
                        let mut dxhat = vec![0.0; d];
                        for y in 0..d {
                            xhat[y] = (xv[y * n + j] - mean) * inv_std;
                            dxhat[y] = g[y * n + j] * gv[y];
                            dgain[y] += g[y * n + j] * xhat[y];
                            dbias[y] += g[y * n + j];
                            sum_dxhat += dxhat[y];
                            sum_dxhat_xhat += dxhat[y] * xhat[y];
                        }
                        for y in 0..d {
                            dx[y * n + j] =
                                inv_std * (dxhat[y] - sum_dxhat / df - xhat[y] * sum_dxhat_xhat / df);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }

                Op::Linear { w, x, b } => {
                    let (o, ic) = (self.nodes[w].shape[0], self.nodes[w].shape[1]);
                    let n = self.nodes[x].shape[1];
                    if self.nodes[w].requires_grad {
                        // dW = G · Xᵀ
                        let xv = &self.nodes[x].values;
                        let mut xt = vec![0.0; n * ic];
                        for y in 0..ic {
                            for j in 0..n {
                                xt[j * ic + y] = xv[y * n + j];
                            }
                        }
                        let mut dw = vec![0.0; o * ic];
                        matmul_raw(&g, &xt, o, n, ic, &mut dw);
                        self.accumulate(w, &dw);
                    }
                    if self.nodes[x].requires_grad {
                        // dX = Wᵀ · G
                        let wv = &self.nodes[w].values;
                        let mut wt = vec![0.0; ic * o];
                        for y in 0..o {
                            for z in 0..ic {
                                wt[z * o + y] = wv[y * ic + z];
                            }
                        }
                        let mut dx = vec![0.0; ic * n];
                        matmul_raw(&wt, &g, ic, o, n, &mut dx);
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[b].requires_grad {
                        let mut db = vec![0.0; o];
                        for y in 0..o {
                            for j in 0..n {
                                db[y] += g[y * n + j];
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }

                Op::Conv2d { input, kernels, bias } => {
                    let ishape = &self.nodes[input].shape;
                    let kshape = &self.nodes[kernels].shape;
                    let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (co, kh, kw) = (kshape[0], kshape[2], kshape[3]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let iv = self.nodes[input].values.clone();
                    let kv = self.nodes[kernels].values.clone();
                    let mut din = vec![0.0; ci * h * w];
                    let mut dk = vec![0.0; co * ci * kh * kw];
                    let mut db = vec![0.0; co];
                    for o in 0..co {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = g[(o * oh + y) * ow + x];
                                db[o] += gv;
                                for c in 0..ci {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let ii = c * h * w + (y + ky) * w + (x + kx);
                                            let ki = ((o * ci + c) * kh + ky) * kw + kx;
                                            din[ii] += gv * kv[ki];
                                            dk[ki] += gv * iv[ii];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(input, &din);
                    self.accumulate(kernels, &dk);
                    self.accumulate(bias, &db);
                }

                Op::MaxPool2 { input, argmax } => {
                    let mut din = vec![0.0; self.nodes[input].values.len()];
                    for (out_idx, &src) in argmax.iter().enumerate() {
                        din[src] += g[out_idx];
                    }
                    self.accumulate(input, &din);
                }

                Op::ConcatCols { parts } => {
                    let total = self.nodes[i].shape[1];
                    let r = self.nodes[i].shape[0];
                    let mut off = 0;
                    for p in parts {
                        let pc = self.nodes[p].shape[1];
                        let mut dp = vec![0.0; r * pc];
                        for y in 0..r {
                            for j in 0..pc {
                                dp[y * pc + j] = g[y * total + off + j];
                            }
                        }
                        self.accumulate(p, &dp);
                        off += pc;
                    }
                }

                Op::ConcatRows { parts } => {
                    let c = self.nodes[i].shape[1];
                    let mut off = 0;
                    for p in parts {
                        let pr = self.nodes[p].shape[0];
                        let dp = g[off * c..(off + pr) * c].to_vec();
                        self.accumulate(p, &dp);
                        off += pr;
                    }
                }

                Op::SliceCols { x, start } => {
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let len = self.nodes[i].shape[1];
                    let mut dx = vec![0.0; r * c];
                    for y in 0..r {
                        for j in 0..len {
                            dx[y * c + start + j] = g[y * len + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }

                Op::GatherCols { x, indices } => {
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let k = indices.len();
                    let mut dx = vec![0.0; r * c];
                    for y in 0..r {
                        for (j, &src) in indices.iter().enumerate() {
                            dx[y * c + src] += g[y * k + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }

                Op::Reshape { x } => {
                    self.accumulate(x, &g);
                }

                Op::Outer { u, v } => {
                    let m = self.nodes[u].values.len();
                    let n = self.nodes[v].values.len();
                    if self.nodes[u].requires_grad {
                        let vv = &self.nodes[v].values;
                        let mut du = vec![0.0; m];
                        for y in 0..m {
                            for j in 0..n {
                                du[y] += g[y * n + j] * vv[j];
                            }
                        }
                        self.accumulate(u, &du);
                    }
                    if self.nodes[v].requires_grad {
                        let uv = &self.nodes[u].values;
                        let mut dv = vec![0.0; n];
                        for y in 0..m {
                            for j in 0..n {
                                dv[j] += g[y * n + j] * uv[y];
                            }
                        }
                        self.accumulate(v, &dv);
                    }
                }

                Op::RowMax { x, argmax } => {
                    let c = self.nodes[x].shape[1];
                    let mut dx = vec![0.0; self.nodes[x].values.len()];
                    for (row, arg) in argmax.iter().enumerate() {
                        if let Some(j) = arg {
                            dx[row * c + j] += g[row];
                        }
                    }
                    self.accumulate(x, &dx);
                }

                Op::SumAll { x } => {
                    let dx = vec![g[0]; self.nodes[x].values.len()];
                    self.accumulate(x, &dx);
                }

                Op::CrossEntropy { logits, label } => {
                    let v = &self.nodes[logits].values;
                    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
                    let dx: Vec<f64> = v
                        .iter()
                        .enumerate()
                        .map(|(c, x)| {
                            let p = (x - m).exp() / z;
                            g[0] * (p - if c == label { 1.0 } else { 0.0 })
                        })
                        .collect();
                    self.accumulate(logits, &dx);
                }

                Op::SigmoidBce { logit, target } => {
                    let x = self.nodes[logit].values[0];
                    let s = 1.0 / (1.0 + (-x).exp());
                    self.accumulate(logit, &[g[0] * (s - target)]);
                }
            }
        }
        Ok(())
    }
}
