//! Recording tape for reverse-mode gradient evaluation.
//!
//! Every forward op pushes a node holding its output value and enough
//! context to replay the chain rule. [`Tape::backward`] walks the nodes in
//! reverse creation order and accumulates gradients additively, so a tensor
//! used twice receives both contributions. A tape covers one forward pass
//! and is discarded after its backward pass.

use super::tensor::{AttentionMask, Tensor, TensorError};
use crate::rng::RngStream;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    MulRowVec { x: Var, v: Var },
    MulElem { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var, mask: AttentionMask },
    AttnApply { weights: Var, values: Var, mask: AttentionMask },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, scale_mask: Vec<f64> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    SumAll { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Wengert-style tape of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients flow back to it iff
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Register a constant (never receives gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Clone of the value without gradient state.
    pub fn detach(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].value;
        Tensor::from_vec(t.shape().to_vec(), t.data().to_vec()).expect("valid by construction")
    }

    /// Gradient of `v` as a tensor, if backward has produced one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].value.grad_tensor()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn emit(&mut self, op: &'static str, value: Tensor, rec: Op, needs: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(self.push(value, rec, needs))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// Standard matrix product `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        require_rank2("matmul", av)?;
        require_rank2("matmul", bv)?;
        if av.cols() != bv.rows() {
            return Err(TensorError::ShapeMismatch {
                context: "matmul inner extents",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = mm(av.data(), bv.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.emit(
            "matmul",
            Tensor::from_vec(vec![m, n], out)?,
            Op::Matmul { a, b },
            needs,
        )
    }

    /// Product with a transposed right factor: `a[m,k] * b[n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        require_rank2("matmul_nt", av)?;
        require_rank2("matmul_nt", bv)?;
        if av.cols() != bv.cols() {
            return Err(TensorError::ShapeMismatch {
                context: "matmul_nt inner extents",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let out = mm_nt(av.data(), bv.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.emit(
            "matmul_nt",
            Tensor::from_vec(vec![m, n], out)?,
            Op::MatmulNt { a, b },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "add operands",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.emit("add", Tensor::from_vec(shape, data)?, Op::Add { a, b }, needs)
    }

    /// Row-broadcast addition: `x[r,c] + bias[c]` applied to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        require_rank2("add_bias", xv)?;
        if bv.rank() != 1 || bv.cols() != xv.cols() {
            return Err(TensorError::ShapeMismatch {
                context: "add_bias vector",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (y, b) in row.iter_mut().zip(bv.data()) {
                *y += b;
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(bias);
        self.emit("add_bias", Tensor::from_vec(shape, data)?, Op::AddBias { x, bias }, needs)
    }

    /// Row-broadcast product: every row of `x[r,c]` scaled elementwise by `v[c]`.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        let (xv, vv) = (self.value(x), self.value(v));
        require_rank2("mul_row_vec", xv)?;
        if vv.rank() != 1 || vv.cols() != xv.cols() {
            return Err(TensorError::ShapeMismatch {
                context: "mul_row_vec vector",
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (y, m) in row.iter_mut().zip(vv.data()) {
                *y *= m;
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(v);
        self.emit("mul_row_vec", Tensor::from_vec(shape, data)?, Op::MulRowVec { x, v }, needs)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "mul_elem operands",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.emit("mul_elem", Tensor::from_vec(shape, data)?, Op::MulElem { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.emit("scale", Tensor::from_vec(shape, data)?, Op::Scale { x, c }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|v| v.max(0.0)).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.emit("relu", Tensor::from_vec(shape, data)?, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.emit("sigmoid", Tensor::from_vec(shape, data)?, Op::Sigmoid { x }, needs)
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        check_axis("softmax", xv, axis)?;
        let mut data = xv.data().to_vec();
        for_each_line(xv.shape(), axis, |idx| {
            let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in idx {
                data[i] = (data[i] - max).exp();
                z += data[i];
            }
            for &i in idx {
                data[i] /= z;
            }
        });
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.emit("softmax", Tensor::from_vec(shape, data)?, Op::Softmax { x, axis }, needs)
    }

    /// Log-softmax along `axis` via the log-sum-exp trick.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        check_axis("log_softmax", xv, axis)?;
        let mut data = xv.data().to_vec();
        for_each_line(xv.shape(), axis, |idx| {
            let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = idx.iter().map(|&i| (data[i] - max).exp()).sum();
            let lse = max + z.ln();
            for &i in idx {
                data[i] -= lse;
            }
        });
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.emit("log_softmax", Tensor::from_vec(shape, data)?, Op::LogSoftmax { x, axis }, needs)
    }

    /// Per-row softmax of a square score matrix where each row only sees the
    /// positions its mask permits. Forbidden positions get an exact 0.0
    /// weight, which is what makes the causality guarantee bit-exact.
    pub fn masked_softmax(&mut self, x: Var, mask: AttentionMask) -> Result<Var, TensorError> {
        let xv = self.value(x);
        require_rank2("masked_softmax", xv)?;
        let l = xv.rows();
        if xv.cols() != l || mask.length != l {
            return Err(TensorError::BadShape {
                op: "masked_softmax",
                expected: "square scores matching mask length",
                got: xv.shape().to_vec(),
            });
        }
        let src = xv.data();
        let mut data = vec![0.0; src.len()];
        for i in 0..l {
            let row = &src[i * l..(i + 1) * l];
            let mut max = f64::NEG_INFINITY;
            for (j, &s) in row.iter().enumerate() {
                if mask.permits(i, j) && s > max {
                    max = s;
                }
            }
            let mut z = 0.0;
            for (j, &s) in row.iter().enumerate() {
                if mask.permits(i, j) {
                    let e = (s - max).exp();
                    data[i * l + j] = e;
                    z += e;
                }
            }
            for (j, d) in data[i * l..(i + 1) * l].iter_mut().enumerate() {
                if mask.permits(i, j) {
                    *d /= z;
                }
            }
        }
        let needs = self.needs(x);
        self.emit(
            "masked_softmax",
            Tensor::from_vec(vec![l, l], data)?,
            Op::MaskedSoftmax { x, mask },
            needs,
        )
    }

    /// Weighted combination `out[i,:] = sum_j w[i,j] * v[j,:]` restricted to
    /// permitted `j`, so masked rows of `v` never enter the sum at all.
    pub fn attn_apply(
        &mut self,
        weights: Var,
        values: Var,
        mask: AttentionMask,
    ) -> Result<Var, TensorError> {
        let (wv, vv) = (self.value(weights), self.value(values));
        require_rank2("attn_apply", wv)?;
        require_rank2("attn_apply", vv)?;
        let l = wv.rows();
        if wv.cols() != l || vv.rows() != l || mask.length != l {
            return Err(TensorError::ShapeMismatch {
                context: "attn_apply weights/values",
                lhs: wv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let c = vv.cols();
        let mut data = vec![0.0; l * c];
        for i in 0..l {
            let out = i * c;
            for j in 0..l {
                if !mask.permits(i, j) {
                    continue;
                }
                let w = wv.data()[i * l + j];
                let vrow = &vv.data()[j * c..(j + 1) * c];
                for (o, val) in data[out..out + c].iter_mut().zip(vrow) {
                    *o += w * val;
                }
            }
        }
        let needs = self.needs(weights) || self.needs(values);
        self.emit(
            "attn_apply",
            Tensor::from_vec(vec![l, c], data)?,
            Op::AttnApply { weights, values, mask },
            needs,
        )
    }

    /// Per-slice normalization over the last axis followed by the affine map
    /// `xhat * gamma + beta`. Variance is the population (divide-by-d) form.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if xv.rank() == 0 {
            return Err(TensorError::BadShape {
                op: "layer_norm",
                expected: "rank >= 1 input",
                got: xv.shape().to_vec(),
            });
        }
        let d = *xv.shape().last().expect("rank checked");
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                context: "layer_norm gamma/beta",
                lhs: gv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (src[j] - mean) * inv;
                xhat[r * d + j] = h;
                data[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.emit(
            "layer_norm",
            Tensor::from_vec(shape, data)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            needs,
        )
    }

    /// Inverted dropout: in training, each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; in evaluation it is the
    /// identity (no node is recorded).
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let scale_mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = xv.data().iter().zip(&scale_mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.emit("dropout", Tensor::from_vec(shape, data)?, Op::Dropout { x, scale_mask }, needs)
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Config("concat_rows of zero parts".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            require_rank2("concat_rows", pv)?;
            if pv.cols() != c {
                return Err(TensorError::ShapeMismatch {
                    context: "concat_rows column counts",
                    lhs: vec![c],
                    rhs: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.emit(
            "concat_rows",
            Tensor::from_vec(vec![rows, c], data)?,
            Op::ConcatRows { parts: parts.to_vec() },
            needs,
        )
    }

    /// Stack matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Config("concat_cols of zero parts".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            require_rank2("concat_cols", pv)?;
            if pv.rows() != r {
                return Err(TensorError::ShapeMismatch {
                    context: "concat_cols row counts",
                    lhs: vec![r],
                    rhs: pv.shape().to_vec(),
                });
            }
            cols += pv.cols();
        }
        let mut data = vec![0.0; r * cols];
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let pc = pv.cols();
            for i in 0..r {
                data[i * cols + offset..i * cols + offset + pc]
                    .copy_from_slice(&pv.data()[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.emit(
            "concat_cols",
            Tensor::from_vec(vec![r, cols], data)?,
            Op::ConcatCols { parts: parts.to_vec() },
            needs,
        )
    }

    /// Contiguous row block `x[start..start+len, :]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        require_rank2("slice_rows", xv)?;
        if start + len > xv.rows() || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                expected: "range within row count",
                got: xv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        self.emit(
            "slice_rows",
            Tensor::from_vec(vec![len, c], data)?,
            Op::SliceRows { x, start },
            needs,
        )
    }

    /// Contiguous column block `x[:, start..start+len]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        require_rank2("slice_cols", xv)?;
        if start + len > xv.cols() || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                expected: "range within column count",
                got: xv.shape().to_vec(),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        self.emit(
            "slice_cols",
            Tensor::from_vec(vec![r, len], data)?,
            Op::SliceCols { x, start },
            needs,
        )
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != xv.numel() {
            return Err(TensorError::LengthMismatch { len: xv.numel(), shape });
        }
        let data = xv.data().to_vec();
        let needs = self.needs(x);
        self.emit("reshape", Tensor::from_vec(shape, data)?, Op::Reshape { x }, needs)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().sum();
        let needs = self.needs(x);
        self.emit("sum_all", Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` tensor reachable from the
    /// scalar `loss`. Contributions accumulate additively across uses.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        {
            let lv = self.value(loss);
            if !lv.is_scalar() {
                return Err(TensorError::NonScalarLoss {
                    got: lv.shape().to_vec(),
                });
            }
        }
        if self.nodes[loss.0].needs_grad {
            self.nodes[loss.0].value.grad = Some(vec![1.0]);
            for i in (0..=loss.0).rev() {
                if !self.nodes[i].needs_grad || self.nodes[i].value.grad.is_none() {
                    continue;
                }
                self.step_backward(i);
            }
        }
        // Contract: every requires_grad tensor ends up with a gradient, even
        // if nothing reached it (zero).
        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let gy = node.value.grad.as_ref().expect("checked by caller");
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let k = before[a.0].value.cols();
                if before[a.0].needs_grad {
                    let da = mm_nt(gy, before[b.0].value.data(), m, n, k);
                    acc(before, *a, &da);
                }
                if before[b.0].needs_grad {
                    let db = mm_tn(before[a.0].value.data(), gy, m, k, n);
                    acc(before, *b, &db);
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let k = before[a.0].value.cols();
                if before[a.0].needs_grad {
                    let da = mm(gy, before[b.0].value.data(), m, n, k);
                    acc(before, *a, &da);
                }
                if before[b.0].needs_grad {
                    let db = mm_tn(gy, before[a.0].value.data(), m, n, k);
                    acc(before, *b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let g = gy.clone();
                acc(before, a, &g);
                acc(before, b, &g);
            }
            Op::AddBias { x, bias } => {
                let c = before[bias.0].value.cols();
                if before[x.0].needs_grad {
                    let g = gy.clone();
                    acc(before, *x, &g);
                }
                if before[bias.0].needs_grad {
                    let mut db = vec![0.0; c];
                    for row in gy.chunks(c) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(before, *bias, &db);
                }
            }
            Op::MulRowVec { x, v } => {
                let c = before[v.0].value.cols();
                if before[x.0].needs_grad {
                    let vdat = before[v.0].value.data();
                    let dx: Vec<f64> = gy
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(vdat).map(|(g, m)| g * m))
                        .collect();
                    acc(before, *x, &dx);
                }
                if before[v.0].needs_grad {
                    let xdat = before[x.0].value.data();
                    let mut dv = vec![0.0; c];
                    for (grow, xrow) in gy.chunks(c).zip(xdat.chunks(c)) {
                        for ((d, g), xval) in dv.iter_mut().zip(grow).zip(xrow) {
                            *d += g * xval;
                        }
                    }
                    acc(before, *v, &dv);
                }
            }
            Op::MulElem { a, b } => {
                if before[a.0].needs_grad {
                    let da: Vec<f64> = gy
                        .iter()
                        .zip(before[b.0].value.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    acc(before, *a, &da);
                }
                if before[b.0].needs_grad {
                    let db: Vec<f64> = gy
                        .iter()
                        .zip(before[a.0].value.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    acc(before, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = gy.iter().map(|g| g * c).collect();
                acc(before, *x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = gy
                    .iter()
                    .zip(before[x.0].value.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(before, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = gy
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                acc(before, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for_each_line(node.value.shape(), *axis, |idx| {
                    let dot: f64 = idx.iter().map(|&i| gy[i] * y[i]).sum();
                    for &i in idx {
                        dx[i] = y[i] * (gy[i] - dot);
                    }
                });
                acc(before, *x, &dx);
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for_each_line(node.value.shape(), *axis, |idx| {
                    let gsum: f64 = idx.iter().map(|&i| gy[i]).sum();
                    for &i in idx {
                        dx[i] = gy[i] - y[i].exp() * gsum;
                    }
                });
                acc(before, *x, &dx);
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = node.value.data();
                let l = node.value.rows();
                let mut dx = vec![0.0; y.len()];
                for i in 0..l {
                    let row = i * l;
                    let mut dot = 0.0;
                    for j in 0..l {
                        if mask.permits(i, j) {
                            dot += gy[row + j] * y[row + j];
                        }
                    }
                    for j in 0..l {
                        if mask.permits(i, j) {
                            dx[row + j] = y[row + j] * (gy[row + j] - dot);
                        }
                    }
                }
                acc(before, *x, &dx);
            }
            Op::AttnApply { weights, values, mask } => {
                let l = node.value.rows();
                let c = node.value.cols();
                if before[weights.0].needs_grad {
                    let vdat = before[values.0].value.data();
                    let mut dw = vec![0.0; l * l];
                    for i in 0..l {
                        for j in 0..l {
                            if mask.permits(i, j) {
                                let mut s = 0.0;
                                for t in 0..c {
                                    s += gy[i * c + t] * vdat[j * c + t];
                                }
                                dw[i * l + j] = s;
                            }
                        }
                    }
                    acc(before, *weights, &dw);
                }
                if before[values.0].needs_grad {
                    let wdat = before[weights.0].value.data();
                    let mut dv = vec![0.0; l * c];
                    for i in 0..l {
                        for j in 0..l {
                            if mask.permits(i, j) {
                                let w = wdat[i * l + j];
                                for t in 0..c {
                                    dv[j * c + t] += w * gy[i * c + t];
                                }
                            }
                        }
                    }
                    acc(before, *values, &dv);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = before[gamma.0].value.cols();
                let rows = xhat.len() / d;
                if before[gamma.0].needs_grad {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                    acc(before, *gamma, &dg);
                }
                if before[beta.0].needs_grad {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += gy[r * d + j];
                        }
                    }
                    acc(before, *beta, &db);
                }
                if before[x.0].needs_grad {
                    let dx = {
                        let gdat = before[gamma.0].value.data();
                        let mut dx = vec![0.0; xhat.len()];
                        for r in 0..rows {
                            let base = r * d;
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..d {
                                let dh = gy[base + j] * gdat[j];
                                mean_dh += dh;
                                mean_dh_h += dh * xhat[base + j];
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            for j in 0..d {
                                let dh = gy[base + j] * gdat[j];
                                dx[base + j] =
                                    inv_std[r] * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                            }
                        }
                        dx
                    };
                    acc(before, *x, &dx);
                }
            }
            Op::Dropout { x, scale_mask } => {
                let dx: Vec<f64> = gy.iter().zip(scale_mask).map(|(g, m)| g * m).collect();
                acc(before, *x, &dx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                let parts = parts.clone();
                for p in parts {
                    let n = before[p.0].value.numel();
                    let g = gy[offset..offset + n].to_vec();
                    acc(before, p, &g);
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let r = node.value.rows();
                let cols = node.value.cols();
                let mut offset = 0;
                let parts = parts.clone();
                for p in parts {
                    let pc = before[p.0].value.cols();
                    let mut g = vec![0.0; r * pc];
                    for i in 0..r {
                        g[i * pc..(i + 1) * pc]
                            .copy_from_slice(&gy[i * cols + offset..i * cols + offset + pc]);
                    }
                    acc(before, p, &g);
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = &before[x.0].value;
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * c..start * c + gy.len()].copy_from_slice(gy);
                acc(before, *x, &dx);
            }
            Op::SliceCols { x, start } => {
                let xv = &before[x.0].value;
                let (r, c) = (xv.rows(), xv.cols());
                let len = node.value.cols();
                let mut dx = vec![0.0; xv.numel()];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&gy[i * len..(i + 1) * len]);
                }
                acc(before, *x, &dx);
            }
            Op::Reshape { x } => {
                let g = gy.clone();
                acc(before, *x, &g);
            }
            Op::SumAll { x } => {
                let n = before[x.0].value.numel();
                let dx = vec![gy[0]; n];
                acc(before, *x, &dx);
            }
        }
    }
}

fn acc(before: &mut [Node], v: Var, contrib: &[f64]) {
    let node = &mut before[v.0];
    if !node.needs_grad {
        return;
    }
    let n = node.value.numel();
    let g = node.value.grad.get_or_insert_with(|| vec![0.0; n]);
    for (gi, ci) in g.iter_mut().zip(contrib) {
        *gi += ci;
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::BadShape {
            op,
            expected: "rank-2 tensor",
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<(), TensorError> {
    if axis >= t.rank().max(1) || t.rank() == 0 {
        return Err(TensorError::BadShape {
            op,
            expected: "axis within rank",
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Visit the flat indices of every 1-D line along `axis`.
fn for_each_line<F: FnMut(&[usize])>(shape: &[usize], axis: usize, mut f: F) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = vec![0usize; n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = o * n * inner + k * inner + i;
            }
            f(&idx);
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[m,k] * b[k,n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] * b[n,k]^T`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m,k]^T * b[m,n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
