//! Reverse-mode differentiation over a recorded op list.
//!
//! A `Graph` owns every intermediate value produced during a forward pass.
//! Ops append a node and return a `TensorId`; `backward` replays the list in
//! exact reverse execution order, accumulating vector-Jacobian products into
//! per-node gradient buffers. Nodes are immutable once produced and a graph
//! is single-owner: it is never traversed concurrently.
//!
//! Every op validates operand shapes up front (config error) and checks its
//! output for NaN/Inf before returning (numeric error naming the op).
//! Broadcasting is restricted to trailing-axis expansion: the right operand
//! of `add`/`mul` may be a suffix of the left operand's shape; anything else
//! needs an explicit reshape.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op<E> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Bmm { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: E },
    Gelu { a: TensorId },
    Softmax { a: TensorId },
    Mean { a: TensorId, axis: usize },
    Variance { a: TensorId, axis: usize },
    Normalize { a: TensorId, eps: E },
    Gather { a: TensorId, indices: Vec<usize> },
    Conv1d { x: TensorId, w: TensorId, stride: usize },
    Reshape { a: TensorId },
    Permute { a: TensorId, perm: Vec<usize> },
    Concat { parts: Vec<TensorId>, axis: usize },
    ScatterRows { x: TensorId, src: TensorId, rows: Vec<usize> },
    RepeatRows { v: TensorId, n: usize },
    SmoothL1 { a: TensorId, beta: E },
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::Mean { .. } => "mean",
            Op::Variance { .. } => "variance",
            Op::Normalize { .. } => "normalize",
            Op::Gather { .. } => "gather",
            Op::Conv1d { .. } => "conv1d",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

pub struct Graph<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    backward_done: bool,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant input. Gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor<E>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a trainable input. `backward` populates its gradient.
    pub fn param(&mut self, value: Tensor<E>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. this node, if populated.
    pub fn grad(&self, id: TensorId) -> Option<Tensor<E>> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone())
                .expect("grad buffer matches value shape")
        })
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, data: Vec<E>, shape: Vec<usize>, op: Op<E>) -> Result<TensorId> {
        let requires_grad = self.inputs_of(&op).iter().any(|id| self.nodes[id.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        value.check_finite(op.name())?;
        Ok(self.push(value, op, requires_grad))
    }

    fn inputs_of(&self, op: &Op<E>) -> Vec<TensorId> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::Bmm { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::Mean { a, .. }
            | Op::Variance { a, .. }
            | Op::Normalize { a, .. }
            | Op::Gather { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::SmoothL1 { a, .. } => vec![*a],
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::Concat { parts, .. } => parts.clone(),
            Op::ScatterRows { x, src, .. } => vec![*x, *src],
            Op::RepeatRows { v, .. } => vec![*v],
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `[m,k] @ [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::config(format!("matmul shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        self.push_checked(out, vec![m, n], Op::Matmul { a, b })
    }

    /// Batched matmul: `[B,m,k] @ [B,k,n] -> [B,m,n]`
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::config(format!("bmm shapes {sa:?} x {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![E::zero(); bsz * m * n];
        for i in 0..bsz {
            let oa = i * m * k;
            let ob = i * k * n;
            let oo = i * m * n;
            matmul_into(&da[oa..oa + m * k], &db[ob..ob + k * n], &mut out[oo..oo + m * n], m, k, n);
        }
        self.push_checked(out, vec![bsz, m, n], Op::Bmm { a, b })
    }

    /// Elementwise add. `b` may be a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_trailing(&sa, &sb, "add")?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let bn = db.len();
        let out: Vec<E> = da.iter().enumerate().map(|(i, &x)| x + db[i % bn]).collect();
        self.push_checked(out, sa, Op::Add { a, b })
    }

    /// Elementwise subtract; shapes must match exactly.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::config(format!("sub shapes {sa:?} vs {sb:?}")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<E> = da.iter().zip(db.iter()).map(|(&x, &y)| x - y).collect();
        self.push_checked(out, sa, Op::Sub { a, b })
    }

    /// Elementwise multiply. `b` may be a trailing suffix of `a`'s shape.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_trailing(&sa, &sb, "mul")?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let bn = db.len();
        let out: Vec<E> = da.iter().enumerate().map(|(i, &x)| x * db[i % bn]).collect();
        self.push_checked(out, sa, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: E) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let out: Vec<E> = self.value(a).data().iter().map(|&x| x * c).collect();
        self.push_checked(out, sa, Op::Scale { a, c })
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let out: Vec<E> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        self.push_checked(out, sa, Op::Gelu { a })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(Error::config("softmax needs rank >= 1".to_string()));
        }
        let w = *sa.last().unwrap();
        let da = self.value(a).data();
        let mut out = vec![E::zero(); da.len()];
        for (row_in, row_out) in da.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            let max = row_in.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for (o, &x) in row_out.iter_mut().zip(row_in.iter()) {
                *o = (x - max).exp();
                sum = sum + *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        self.push_checked(out, sa, Op::Softmax { a })
    }

    /// Mean over one axis; that axis is removed from the shape.
    pub fn mean(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (out, shape) = self.reduce(a, axis, "mean")?;
        self.push_checked(out, shape, Op::Mean { a, axis })
    }

    /// Population variance over one axis; that axis is removed.
    pub fn variance(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::config(format!("variance axis {axis} for shape {sa:?}")));
        }
        let (outer, n, inner) = split_axis(&sa, axis);
        let da = self.value(a).data();
        let mut out = vec![E::zero(); outer * inner];
        let inv_n = E::from_f64(1.0 / n as f64);
        for o in 0..outer {
            for i in 0..inner {
                let mut mu = E::zero();
                for j in 0..n {
                    mu = mu + da[(o * n + j) * inner + i];
                }
                mu = mu * inv_n;
                let mut acc = E::zero();
                for j in 0..n {
                    let d = da[(o * n + j) * inner + i] - mu;
                    acc = acc + d * d;
                }
                out[o * inner + i] = acc * inv_n;
            }
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        self.push_checked(out, shape, Op::Variance { a, axis })
    }

    /// Parameter-free standardization over the last axis:
    /// `(x - mean) / sqrt(var + eps)` per row.
    pub fn normalize(&mut self, a: TensorId, eps: E) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(Error::config("normalize needs rank >= 1".to_string()));
        }
        let w = *sa.last().unwrap();
        let da = self.value(a).data();
        let mut out = vec![E::zero(); da.len()];
        let inv_n = E::from_f64(1.0 / w as f64);
        for (row_in, row_out) in da.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            let mut mu = E::zero();
            for &x in row_in {
                mu = mu + x;
            }
            mu = mu * inv_n;
            let mut var = E::zero();
            for &x in row_in {
                let d = x - mu;
                var = var + d * d;
            }
            var = var * inv_n;
            let inv = (var + eps).sqrt().recip();
            for (o, &x) in row_out.iter_mut().zip(row_in.iter()) {
                *o = (x - mu) * inv;
            }
        }
        self.push_checked(out, sa, Op::Normalize { a, eps })
    }

    /// Select rows (axis 0) by an index set; indices may repeat.
    pub fn gather(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(Error::config("gather needs rank >= 1".to_string()));
        }
        if indices.is_empty() {
            return Err(Error::config("gather with empty index set".to_string()));
        }
        let rows = sa[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::state(format!("gather index {bad} out of range 0..{rows}")));
        }
        let inner: usize = sa[1..].iter().product();
        let da = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &r in indices {
            out.extend_from_slice(&da[r * inner..(r + 1) * inner]);
        }
        let mut shape = sa.clone();
        shape[0] = indices.len();
        self.push_checked(out, shape, Op::Gather { a, indices: indices.to_vec() })
    }

    /// Valid (unpadded) 1-D convolution: `x [Cin, L]`, `w [Cout, Cin, k]`,
    /// output `[Cout, floor((L - k) / stride) + 1]`.
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, stride: usize) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[1] {
            return Err(Error::config(format!("conv1d shapes x {sx:?} w {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::config("conv1d stride must be positive".to_string()));
        }
        let (cin, len) = (sx[0], sx[1]);
        let (cout, k) = (sw[0], sw[2]);
        if len < k {
            return Err(Error::input(format!("conv1d input length {len} shorter than kernel {k}")));
        }
        let out_len = (len - k) / stride + 1;
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![E::zero(); cout * out_len];
        for co in 0..cout {
            for t in 0..out_len {
                let base = t * stride;
                let mut acc = E::zero();
                for ci in 0..cin {
                    let xr = &dx[ci * len + base..ci * len + base + k];
                    let wr = &dw[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    for (xv, wv) in xr.iter().zip(wr.iter()) {
                        acc = acc + *xv * *wv;
                    }
                }
                out[co * out_len + t] = acc;
            }
        }
        self.push_checked(out, vec![cout, out_len], Op::Conv1d { x, w, stride })
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.value(a).data().to_vec();
        self.push_checked(data, shape, Op::Reshape { a })
    }

    /// General axis permutation (transpose for rank 2).
    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if !is_permutation(perm, sa.len()) {
            return Err(Error::config(format!("permute {perm:?} for rank {}", sa.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let data = permute_raw(self.value(a).data(), &sa, perm);
        self.push_checked(data, out_shape, Op::Permute { a, perm: perm.to_vec() })
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.permute(a, &[1, 0])
    }

    /// Concatenate along an axis; all other extents must agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::config("concat of zero tensors".to_string()));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if axis >= s0.len() {
            return Err(Error::config(format!("concat axis {axis} for shape {s0:?}")));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len()
                || sp.iter().enumerate().any(|(i, &d)| i != axis && d != s0[i])
            {
                return Err(Error::config(format!("concat shapes {s0:?} vs {sp:?} on axis {axis}")));
            }
            axis_total += sp[axis];
        }
        let mut shape = s0.clone();
        shape[axis] = axis_total;
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = vec![E::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let ext = self.shape(p)[axis];
            let dp = self.value(p).data();
            for o in 0..outer {
                let src = &dp[o * ext * inner..(o + 1) * ext * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + ext * inner].copy_from_slice(src);
            }
            offset += ext;
        }
        self.push_checked(out, shape, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Replace rows of `x` (axis 0) at `rows` with the rows of `src`.
    /// `rows` must be distinct and in range; `src` is `[rows.len(), ...]`.
    pub fn scatter_rows(&mut self, x: TensorId, src: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(src).to_vec());
        if sx.is_empty() || ss.len() != sx.len() || ss[1..] != sx[1..] || ss[0] != rows.len() {
            return Err(Error::config(format!("scatter_rows shapes x {sx:?} src {ss:?} rows {}", rows.len())));
        }
        let mut seen = vec![false; sx[0]];
        for &r in rows {
            if r >= sx[0] {
                return Err(Error::state(format!("scatter_rows row {r} out of range 0..{}", sx[0])));
            }
            if seen[r] {
                return Err(Error::state(format!("scatter_rows duplicate row {r}")));
            }
            seen[r] = true;
        }
        let inner: usize = sx[1..].iter().product();
        let mut out = self.value(x).data().to_vec();
        let dsrc = self.value(src).data();
        for (i, &r) in rows.iter().enumerate() {
            out[r * inner..(r + 1) * inner].copy_from_slice(&dsrc[i * inner..(i + 1) * inner]);
        }
        self.push_checked(out, sx, Op::ScatterRows { x, src, rows: rows.to_vec() })
    }

    /// Tile a tensor as `n` rows: `v [..]` becomes `[n, ..]`.
    pub fn repeat_rows(&mut self, v: TensorId, n: usize) -> Result<TensorId> {
        if n == 0 {
            return Err(Error::config("repeat_rows n must be positive".to_string()));
        }
        let sv = self.shape(v).to_vec();
        let dv = self.value(v).data();
        let mut out = Vec::with_capacity(n * dv.len());
        for _ in 0..n {
            out.extend_from_slice(dv);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&sv);
        self.push_checked(out, shape, Op::RepeatRows { v, n })
    }

    /// Elementwise Smooth-L1 kernel: quadratic within `beta` of zero,
    /// linear outside, continuous at the junction.
    pub fn smooth_l1(&mut self, a: TensorId, beta: E) -> Result<TensorId> {
        if beta <= E::zero() {
            return Err(Error::config("smooth_l1 beta must be positive".to_string()));
        }
        let sa = self.shape(a).to_vec();
        let half = E::from_f64(0.5);
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .map(|&r| {
                if r.abs() <= beta {
                    r * r / (beta + beta)
                } else {
                    r.abs() - half * beta
                }
            })
            .collect();
        self.push_checked(out, sa, Op::SmoothL1 { a, beta })
    }

    /// Mean over every element, producing a rank-0 scalar.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        self.mean(flat, 0)
    }

    fn reduce(&self, a: TensorId, axis: usize, op: &str) -> Result<(Vec<E>, Vec<usize>)> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::config(format!("{op} axis {axis} for shape {sa:?}")));
        }
        let (outer, n, inner) = split_axis(&sa, axis);
        let da = self.value(a).data();
        let inv_n = E::from_f64(1.0 / n as f64);
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + da[base + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv_n;
        }
        let mut shape = sa;
        shape.remove(axis);
        Ok((out, shape))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// `param` leaf (zeros if the loss does not depend on it). Calling it a
    /// second time without a fresh graph is a state error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::state("backward called twice on the same graph".to_string()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::state(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![E::one()]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backward_op(TensorId(i), &op)?;
        }

        // Leaves the loss never touched still get a (zero) gradient.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad
                && matches!(self.nodes[i].op, Op::Leaf)
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![E::zero(); self.nodes[i].value.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[E]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib.iter()) {
                    *gi = *gi + c;
                }
            }
            None => self.grads[id.0] = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&mut self, out: TensorId, op: &Op<E>) -> Result<()> {
        let d = match &self.grads[out.0] {
            Some(d) => d.clone(),
            None => return Ok(()),
        };
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da_in = self.value(*a).data().to_vec();
                let db_in = self.value(*b).data().to_vec();
                // dA = dOut @ B^T
                let mut ga = vec![E::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let dv = d[i * n + j];
                        for kk in 0..k {
                            ga[i * k + kk] = ga[i * k + kk] + dv * db_in[kk * n + j];
                        }
                    }
                }
                self.accumulate(*a, &ga);
                // dB = A^T @ dOut
                let mut gb = vec![E::zero(); k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let av = da_in[i * k + kk];
                        let drow = &d[i * n..(i + 1) * n];
                        let grow = &mut gb[kk * n..(kk + 1) * n];
                        for (g, &dv) in grow.iter_mut().zip(drow.iter()) {
                            *g = *g + av * dv;
                        }
                    }
                }
                self.accumulate(*b, &gb);
            }
            Op::Bmm { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let da_in = self.value(*a).data().to_vec();
                let db_in = self.value(*b).data().to_vec();
                let mut ga = vec![E::zero(); bsz * m * k];
                let mut gb = vec![E::zero(); bsz * k * n];
                for bi in 0..bsz {
                    let (oa, ob, oo) = (bi * m * k, bi * k * n, bi * m * n);
                    for i in 0..m {
                        for j in 0..n {
                            let dv = d[oo + i * n + j];
                            for kk in 0..k {
                                ga[oa + i * k + kk] = ga[oa + i * k + kk] + dv * db_in[ob + kk * n + j];
                                gb[ob + kk * n + j] = gb[ob + kk * n + j] + dv * da_in[oa + i * k + kk];
                            }
                        }
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, &d);
                let bn = self.value(*b).numel();
                if bn == d.len() {
                    self.accumulate(*b, &d);
                } else {
                    let mut gb = vec![E::zero(); bn];
                    for (i, &dv) in d.iter().enumerate() {
                        gb[i % bn] = gb[i % bn] + dv;
                    }
                    self.accumulate(*b, &gb);
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, &d);
                let gb: Vec<E> = d.iter().map(|&x| -x).collect();
                self.accumulate(*b, &gb);
            }
            Op::Mul { a, b } => {
                let va = self.value(*a).data().to_vec();
                let vb = self.value(*b).data().to_vec();
                let bn = vb.len();
                let ga: Vec<E> = d.iter().enumerate().map(|(i, &dv)| dv * vb[i % bn]).collect();
                self.accumulate(*a, &ga);
                let mut gb = vec![E::zero(); bn];
                for (i, &dv) in d.iter().enumerate() {
                    gb[i % bn] = gb[i % bn] + dv * va[i];
                }
                self.accumulate(*b, &gb);
            }
            Op::Scale { a, c } => {
                let ga: Vec<E> = d.iter().map(|&x| x * *c).collect();
                self.accumulate(*a, &ga);
            }
            Op::Gelu { a } => {
                let va = self.value(*a).data().to_vec();
                let ga: Vec<E> = d.iter().zip(va.iter()).map(|(&dv, &x)| dv * gelu_bwd(x)).collect();
                self.accumulate(*a, &ga);
            }
            Op::Softmax { a } => {
                let y = self.value(out).data().to_vec();
                let w = *self.shape(out).last().unwrap();
                let mut ga = vec![E::zero(); y.len()];
                for r in 0..y.len() / w {
                    let ys = &y[r * w..(r + 1) * w];
                    let ds = &d[r * w..(r + 1) * w];
                    let mut dot = E::zero();
                    for (yv, dv) in ys.iter().zip(ds.iter()) {
                        dot = dot + *yv * *dv;
                    }
                    for c in 0..w {
                        ga[r * w + c] = ys[c] * (ds[c] - dot);
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Mean { a, axis } => {
                let sa = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&sa, *axis);
                let inv_n = E::from_f64(1.0 / n as f64);
                let mut ga = vec![E::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[(o * n + j) * inner + i] = d[o * inner + i] * inv_n;
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Variance { a, axis } => {
                let sa = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&sa, *axis);
                let va = self.value(*a).data().to_vec();
                let inv_n = E::from_f64(1.0 / n as f64);
                let two = E::from_f64(2.0);
                let mut ga = vec![E::zero(); va.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut mu = E::zero();
                        for j in 0..n {
                            mu = mu + va[(o * n + j) * inner + i];
                        }
                        mu = mu * inv_n;
                        let dv = d[o * inner + i];
                        for j in 0..n {
                            let idx = (o * n + j) * inner + i;
                            ga[idx] = dv * two * (va[idx] - mu) * inv_n;
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Normalize { a, eps } => {
                let va = self.value(*a).data().to_vec();
                let y = self.value(out).data().to_vec();
                let w = *self.shape(out).last().unwrap();
                let inv_n = E::from_f64(1.0 / w as f64);
                let mut ga = vec![E::zero(); va.len()];
                for r in 0..va.len() / w {
                    let xs = &va[r * w..(r + 1) * w];
                    let ys = &y[r * w..(r + 1) * w];
                    let ds = &d[r * w..(r + 1) * w];
                    let mut mu = E::zero();
                    for &x in xs {
                        mu = mu + x;
                    }
                    mu = mu * inv_n;
                    let mut var = E::zero();
                    for &x in xs {
                        let dd = x - mu;
                        var = var + dd * dd;
                    }
                    var = var * inv_n;
                    let inv = (var + *eps).sqrt().recip();
                    let mut mean_d = E::zero();
                    let mut mean_dy = E::zero();
                    for (dv, yv) in ds.iter().zip(ys.iter()) {
                        mean_d = mean_d + *dv;
                        mean_dy = mean_dy + *dv * *yv;
                    }
                    mean_d = mean_d * inv_n;
                    mean_dy = mean_dy * inv_n;
                    for c in 0..w {
                        ga[r * w + c] = inv * (ds[c] - mean_d - ys[c] * mean_dy);
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Gather { a, indices } => {
                let sa = self.shape(*a).to_vec();
                let inner: usize = sa[1..].iter().product();
                let mut ga = vec![E::zero(); sa.iter().product()];
                for (i, &r) in indices.iter().enumerate() {
                    let src = &d[i * inner..(i + 1) * inner];
                    let dst = &mut ga[r * inner..(r + 1) * inner];
                    for (g, &dv) in dst.iter_mut().zip(src.iter()) {
                        *g = *g + dv;
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Conv1d { x, w, stride } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (cin, len) = (sx[0], sx[1]);
                let (cout, k) = (sw[0], sw[2]);
                let out_len = (len - k) / stride + 1;
                let vx = self.value(*x).data().to_vec();
                let vw = self.value(*w).data().to_vec();
                let mut gx = vec![E::zero(); cin * len];
                let mut gw = vec![E::zero(); cout * cin * k];
                for co in 0..cout {
                    for t in 0..out_len {
                        let dv = d[co * out_len + t];
                        if dv == E::zero() {
                            continue;
                        }
                        let base = t * stride;
                        for ci in 0..cin {
                            let wrow = &vw[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                            let xrow = &vx[ci * len + base..ci * len + base + k];
                            let gxrow = &mut gx[ci * len + base..ci * len + base + k];
                            for j in 0..k {
                                gxrow[j] = gxrow[j] + dv * wrow[j];
                            }
                            let gwrow = &mut gw[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                            for j in 0..k {
                                gwrow[j] = gwrow[j] + dv * xrow[j];
                            }
                        }
                    }
                }
                self.accumulate(*x, &gx);
                self.accumulate(*w, &gw);
            }
            Op::Reshape { a } => {
                self.accumulate(*a, &d);
            }
            Op::Permute { a, perm } => {
                let sa = self.shape(*a).to_vec();
                let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
                let inv = invert_permutation(perm);
                let ga = permute_raw(&d, &out_shape, &inv);
                self.accumulate(*a, &ga);
            }
            Op::Concat { parts, axis } => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                let outer: usize = shapes[0][..*axis].iter().product();
                let inner: usize = shapes[0][*axis + 1..].iter().product();
                let axis_total: usize = shapes.iter().map(|s| s[*axis]).sum();
                let mut offset = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let ext = shapes[pi][*axis];
                    let mut gp = vec![E::zero(); outer * ext * inner];
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset) * inner;
                        gp[o * ext * inner..(o + 1) * ext * inner]
                            .copy_from_slice(&d[src_start..src_start + ext * inner]);
                    }
                    self.accumulate(p, &gp);
                    offset += ext;
                }
            }
            Op::ScatterRows { x, src, rows } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                let mut gx = d.clone();
                let mut gsrc = vec![E::zero(); rows.len() * inner];
                for (i, &r) in rows.iter().enumerate() {
                    gsrc[i * inner..(i + 1) * inner].copy_from_slice(&d[r * inner..(r + 1) * inner]);
                    for g in gx[r * inner..(r + 1) * inner].iter_mut() {
                        *g = E::zero();
                    }
                }
                self.accumulate(*x, &gx);
                self.accumulate(*src, &gsrc);
            }
            Op::RepeatRows { v, n } => {
                let vn = self.value(*v).numel();
                let mut gv = vec![E::zero(); vn];
                for r in 0..*n {
                    for i in 0..vn {
                        gv[i] = gv[i] + d[r * vn + i];
                    }
                }
                self.accumulate(*v, &gv);
            }
            Op::SmoothL1 { a, beta } => {
                let va = self.value(*a).data().to_vec();
                let ga: Vec<E> = d
                    .iter()
                    .zip(va.iter())
                    .map(|(&dv, &r)| {
                        let slope = if r.abs() <= *beta { r / *beta } else { r.signum() };
                        dv * slope
                    })
                    .collect();
                self.accumulate(*a, &ga);
            }
        }
        Ok(())
    }
}

// ── shared kernels ───────────────────────────────────────────────────

fn matmul_raw<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    matmul_into(a, b, &mut out, m, k, n);
    out
}

fn matmul_into<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<E: Elem>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_bwd<E: Elem>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn check_trailing(sa: &[usize], sb: &[usize], op: &str) -> crate::error::Result<()> {
    if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
        return Err(Error::config(format!(
            "{op}: shape {sb:?} is not a trailing suffix of {sa:?}"
        )));
    }
    Ok(())
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_raw<E: Elem>(data: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(shape);
    let out_strides = row_major_strides(&out_shape);
    let mut out = vec![E::zero(); data.len()];
    let mut idx = vec![0usize; rank];
    for &v in data {
        let mut out_flat = 0;
        for (o, &p) in perm.iter().enumerate() {
            out_flat += idx[p] * out_strides[o];
        }
        out[out_flat] = v;
        // advance the row-major multi-index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let _ = in_strides;
    out
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
