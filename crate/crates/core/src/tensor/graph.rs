//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass as a topologically ordered list of
//! nodes; [`Graph::backward`] walks the list in reverse, accumulating each
//! parameter's gradient over all of its uses. Graphs are rebuilt every
//! training step because gate masks are resampled per step.
//!
//! Gradients are only propagated into subtrees that contain at least one
//! `requires_grad` leaf, so frozen weights never pay for a weight-gradient
//! GEMM.

use super::kernels::{fast_exp, gemm_nn, gemm_nt, gemm_tn, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { x: NodeId, mul: f32 },
    Sigmoid { x: NodeId },
    Silu { x: NodeId, sigma: Vec<f32> },
    Log { x: NodeId },
    Clamp { x: NodeId, lo: f32, hi: f32 },
    SoftmaxLast { x: NodeId },
    RmsNorm { x: NodeId, divisor: usize, inv_rms: Vec<f32> },
    Gather { table: NodeId, ids: Vec<u32> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    Rope { x: NodeId, head_dim: usize, positions: Vec<u32>, base: f32 },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, ignore: Vec<bool>, probs: Vec<f32>, n_kept: usize },
    Sum { x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Silu { .. } => "silu",
            Op::Log { .. } => "log",
            Op::Clamp { .. } => "clamp",
            Op::SoftmaxLast { .. } => "softmax",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Gather { .. } => "embedding-gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Rope { .. } => "rotary-position-apply",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// How the second operand of `add`/`mul` maps onto the first.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    /// Identical shapes.
    Same,
    /// `a` is `(r, c)`, `b` is `(c,)`: `b` repeats along rows.
    RowVec,
    /// `b` is a single element.
    Scalar,
}

pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    backward_ran: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// New graph. Finite checks on every produced buffer default to on in
    /// debug builds; hot loops opt out via [`Graph::with_finite_checks`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(512),
            check_finite: cfg!(debug_assertions),
            backward_ran: false,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.check_finite && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn mismatch(op: &'static str, details: String) -> Error {
        Error::ShapeMismatch { op, details }
    }

    // ---- leaves ------------------------------------------------------------

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Self::mismatch(
                "leaf",
                format!("shape {:?} does not hold {} values", shape, data.len()),
            ));
        }
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(t.shape.clone(), t.data.clone(), requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f32) -> Result<NodeId> {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    // ---- ops ---------------------------------------------------------------

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Self::mismatch(op, format!("expected rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Self::mismatch(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, ka, n, self.value(a), self.value(b), 0.0, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(vec![m, n], out, rg, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires_grad(x);
        self.push(vec![c, r], out, rg, Op::Transpose { x })
    }

    fn bcast_kind(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb == [1] {
            Ok(Bcast::Scalar)
        } else if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            Ok(Bcast::RowVec)
        } else {
            Err(Self::mismatch(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    /// Elementwise sum; `b` may be a matching row-vector or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let kind = self.bcast_kind(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = va.to_vec();
        match kind {
            Bcast::Same => out.iter_mut().zip(vb).for_each(|(o, x)| *o += x),
            Bcast::Scalar => {
                let s = vb[0];
                out.iter_mut().for_each(|o| *o += s);
            }
            Bcast::RowVec => {
                let c = vb.len();
                out.chunks_mut(c).for_each(|row| row.iter_mut().zip(vb).for_each(|(o, x)| *o += x));
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::Add { a, b })
    }

    /// Elementwise product; `b` may be a matching row-vector or a scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let kind = self.bcast_kind(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = va.to_vec();
        match kind {
            Bcast::Same => out.iter_mut().zip(vb).for_each(|(o, x)| *o *= x),
            Bcast::Scalar => {
                let s = vb[0];
                out.iter_mut().for_each(|o| *o *= s);
            }
            Bcast::RowVec => {
                let c = vb.len();
                out.chunks_mut(c).for_each(|row| row.iter_mut().zip(vb).for_each(|(o, x)| *o *= x));
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, Op::Mul { a, b })
    }

    /// `y = mul * x + add`, elementwise with constants.
    pub fn affine(&mut self, x: NodeId, mul: f32, add: f32) -> Result<NodeId> {
        let out: Vec<f32> = self.value(x).iter().map(|v| mul * v + add).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> Result<NodeId> {
        self.affine(x, c, 0.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f32> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Sigmoid { x })
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        let mut sigma = vec![0.0f32; src.len()];
        let mut out = vec![0.0f32; src.len()];
        let work = |(sg, (o, v)): (&mut f32, (&mut f32, &f32))| {
            *sg = sigmoid(*v);
            *o = *v * *sg;
        };
        if src.len() >= 1 << 16 {
            sigma
                .par_iter_mut()
                .zip_eq(out.par_iter_mut().zip_eq(src.par_iter()))
                .for_each(work);
        } else {
            sigma.iter_mut().zip(out.iter_mut().zip(src.iter())).for_each(work);
        }
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Silu { x, sigma })
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f32> = self.value(x).iter().map(|v| v.ln()).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Log { x })
    }

    /// Clamp into `[lo, hi]`. Subgradient is zero outside the open interval,
    /// including exactly at the boundaries.
    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        let out: Vec<f32> = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last dimension (each row of a rank-2 tensor, or the
    /// whole of a rank-1 tensor).
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        let c = *s.last().ok_or_else(|| Self::mismatch("softmax", "rank-0 input".into()))?;
        let src = self.value(x);
        let mut out = vec![0.0f32; src.len()];
        let row_softmax = |(dst, row): (&mut [f32], &[f32])| {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (d, &v) in dst.iter_mut().zip(row) {
                let e = fast_exp(v - mx);
                *d = e;
                z += e;
            }
            let inv = 1.0 / z;
            dst.iter_mut().for_each(|d| *d *= inv);
        };
        if src.len() >= 1 << 15 {
            out.par_chunks_mut(c).zip_eq(src.par_chunks(c)).for_each(row_softmax);
        } else {
            out.chunks_mut(c).zip(src.chunks(c)).for_each(row_softmax);
        }
        let rg = self.requires_grad(x);
        let shape = s.to_vec();
        self.push(shape, out, rg, Op::SoftmaxLast { x })
    }

    /// Root-mean-square normalization of each row: `x / sqrt(sum(x^2)/divisor + eps)`.
    ///
    /// The divisor is an explicit parameter decoupled from the row length so
    /// an excised model can keep normalizing by the original hidden size.
    pub fn rmsnorm(&mut self, x: NodeId, divisor: usize, eps: f32) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "rmsnorm")?;
        if divisor == 0 {
            return Err(Self::mismatch("rmsnorm", "divisor must be positive".into()));
        }
        let src = self.value(x);
        let mut out = vec![0.0f32; src.len()];
        let mut inv_rms = vec![0.0f32; r];
        let d = divisor as f32;
        for ((dst, row), inv) in out.chunks_mut(c).zip(src.chunks(c)).zip(inv_rms.iter_mut()) {
            let ss: f32 = row.iter().map(|v| v * v).sum();
            *inv = 1.0 / (ss / d + eps).sqrt();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = v * *inv;
            }
        }
        let rg = self.requires_grad(x);
        self.push(vec![r, c], out, rg, Op::RmsNorm { x, divisor, inv_rms })
    }

    /// Row lookup: `table` is `(v, d)`, output is `(ids.len(), d)`.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "embedding-gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Self::mismatch(
                "embedding-gather",
                format!("id {bad} out of range for table with {v} rows"),
            ));
        }
        let src = self.value(table);
        let mut out = vec![0.0f32; ids.len() * d];
        for (dst, &id) in out.chunks_mut(d).zip(ids) {
            dst.copy_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push(vec![ids.len(), d], out, rg, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Self::mismatch("concat", "no inputs".into()));
        }
        let (r0, c0) = self.dims2(parts[0], "concat")?;
        let (mut rows, mut cols) = (r0, c0);
        for &p in &parts[1..] {
            let (r, c) = self.dims2(p, "concat")?;
            match axis {
                0 if c == c0 => rows += r,
                1 if r == r0 => cols += c,
                _ => {
                    return Err(Self::mismatch(
                        "concat",
                        format!("axis {axis}: incompatible shapes {:?} and {:?}", self.shape(parts[0]), self.shape(p)),
                    ))
                }
            }
        }
        let mut out = vec![0.0f32; rows * cols];
        match axis {
            0 => {
                let mut off = 0;
                for &p in parts {
                    let v = self.value(p);
                    out[off..off + v.len()].copy_from_slice(v);
                    off += v.len();
                }
            }
            1 => {
                let mut col_off = 0;
                for &p in parts {
                    let (_, c) = self.dims2(p, "concat")?;
                    let v = self.value(p);
                    for i in 0..r0 {
                        out[i * cols + col_off..i * cols + col_off + c].copy_from_slice(&v[i * c..(i + 1) * c]);
                    }
                    col_off += c;
                }
            }
            _ => return Err(Self::mismatch("concat", format!("axis {axis} out of range"))),
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(vec![rows, cols], out, rg, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Contiguous sub-range along `axis`. Rank-1 tensors slice on axis 0.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        match (s.len(), axis) {
            (1, 0) => {
                if start + len > s[0] {
                    return Err(Self::mismatch("slice", format!("range {start}..{} out of {}", start + len, s[0])));
                }
                let out = self.value(x)[start..start + len].to_vec();
                self.push(vec![len], out, rg, Op::Slice { x, axis, start, len })
            }
            (2, 0) => {
                let (r, c) = (s[0], s[1]);
                if start + len > r {
                    return Err(Self::mismatch("slice", format!("rows {start}..{} out of {r}", start + len)));
                }
                let out = self.value(x)[start * c..(start + len) * c].to_vec();
                self.push(vec![len, c], out, rg, Op::Slice { x, axis, start, len })
            }
            (2, 1) => {
                let (r, c) = (s[0], s[1]);
                if start + len > c {
                    return Err(Self::mismatch("slice", format!("cols {start}..{} out of {c}", start + len)));
                }
                let src = self.value(x);
                let mut out = vec![0.0f32; r * len];
                for i in 0..r {
                    out[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
                }
                self.push(vec![r, len], out, rg, Op::Slice { x, axis, start, len })
            }
            _ => Err(Self::mismatch("slice", format!("axis {axis} invalid for shape {s:?}"))),
        }
    }

    /// Rotary position embedding applied in place over every `head_dim`-wide
    /// slice of each row. Rotates pairs `(j, j + head_dim/2)` within a head.
    pub fn rope(&mut self, x: NodeId, head_dim: usize, positions: &[u32], base: f32) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "rotary-position-apply")?;
        if head_dim == 0 || head_dim % 2 != 0 || c % head_dim != 0 {
            return Err(Self::mismatch(
                "rotary-position-apply",
                format!("cols {c} not divisible into even head_dim {head_dim}"),
            ));
        }
        if positions.len() != r {
            return Err(Self::mismatch(
                "rotary-position-apply",
                format!("{} positions for {r} rows", positions.len()),
            ));
        }
        let half = head_dim / 2;
        let freqs: Vec<f32> = (0..half).map(|j| base.powf(-2.0 * j as f32 / head_dim as f32)).collect();
        let src = self.value(x);
        let mut out = src.to_vec();
        for (row, &pos) in out.chunks_mut(c).zip(positions) {
            for head in row.chunks_mut(head_dim) {
                for j in 0..half {
                    let angle = pos as f32 * freqs[j];
                    let (sin, cos) = angle.sin_cos();
                    let a = head[j];
                    let b = head[j + half];
                    head[j] = a * cos - b * sin;
                    head[j + half] = a * sin + b * cos;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(vec![r, c], out, rg, Op::Rope { x, head_dim, positions: positions.to_vec(), base })
    }

    /// Mean next-token cross-entropy over rows whose `ignore` flag is false.
    ///
    /// Returns a scalar. With every row ignored the loss is exactly 0 and no
    /// gradients flow.
    pub fn cross_entropy_ignore(&mut self, logits: NodeId, targets: &[u32], ignore: &[bool]) -> Result<NodeId> {
        let (r, v) = self.dims2(logits, "cross-entropy")?;
        if targets.len() != r || ignore.len() != r {
            return Err(Self::mismatch(
                "cross-entropy",
                format!("{r} rows vs {} targets / {} ignore flags", targets.len(), ignore.len()),
            ));
        }
        if let Some(&bad) = targets.iter().zip(ignore).filter(|(_, &ig)| !ig).map(|(t, _)| t).find(|&&t| t as usize >= v) {
            return Err(Self::mismatch("cross-entropy", format!("target {bad} out of vocab {v}")));
        }
        let src = self.value(logits);
        let n_kept = ignore.iter().filter(|&&ig| !ig).count();
        let mut probs = vec![0.0f32; src.len()];
        let mut total = 0.0f64;
        if n_kept > 0 {
            let losses: Vec<f64> = probs
                .par_chunks_mut(v)
                .zip_eq(src.par_chunks(v))
                .zip_eq(targets.par_iter().zip_eq(ignore.par_iter()))
                .map(|((p_row, row), (&t, &ig))| {
                    if ig {
                        return 0.0f64;
                    }
                    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut z = 0.0f32;
                    for (p, &l) in p_row.iter_mut().zip(row) {
                        let e = fast_exp(l - mx);
                        *p = e;
                        z += e;
                    }
                    let inv = 1.0 / z;
                    p_row.iter_mut().for_each(|p| *p *= inv);
                    let lse = z.ln() + mx;
                    (lse - row[t as usize]) as f64
                })
                .collect();
            total = losses.iter().sum();
        }
        let loss = if n_kept == 0 { 0.0 } else { (total / n_kept as f64) as f32 };
        let rg = self.requires_grad(logits) && n_kept > 0;
        self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore: ignore.to_vec(), probs, n_kept },
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f32 = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![total], rg, Op::Sum { x })
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Each `requires_grad` tensor
    /// reachable from the loss ends up holding its full gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_ran {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.backward_ran = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            let g = node.grad.as_ref().unwrap();
            let out_data = &node.data;
            let out_shape = &node.shape;
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, n) = (out_shape[0], out_shape[1]);
                    let k = before[a.0].shape[1];
                    if a.0 == b.0 {
                        // x @ x: both factor gradients land in the same buffer
                        let xn = &mut before[a.0];
                        if xn.requires_grad {
                            let xv = xn.data.clone();
                            let gx = grad_buf(xn);
                            gemm_nt(m, n, k, g, &xv, 1.0, gx);
                            gemm_tn(k, m, n, &xv, g, 1.0, gx);
                        }
                    } else {
                        if before[a.0].requires_grad {
                            let (an, bn) = split_two(before, a.0, b.0);
                            let ga = grad_buf(an);
                            gemm_nt(m, n, k, g, &bn.data, 1.0, ga);
                        }
                        if before[b.0].requires_grad {
                            let (bn, an) = split_two(before, b.0, a.0);
                            let gb = grad_buf(bn);
                            gemm_tn(k, m, n, &an.data, g, 1.0, gb);
                        }
                    }
                }
                Op::Transpose { x } => {
                    let (r_out, c_out) = (out_shape[0], out_shape[1]);
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let gx = grad_buf(xn);
                        for i2 in 0..r_out {
                            for j2 in 0..c_out {
                                gx[j2 * r_out + i2] += g[i2 * c_out + j2];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let kind = bcast_of(&before[a.0].shape, &before[b.0].shape);
                    if before[a.0].requires_grad {
                        let ga = grad_buf(&mut before[a.0]);
                        ga.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                    if before[b.0].requires_grad {
                        let blen = before[b.0].data.len();
                        let gb = grad_buf(&mut before[b.0]);
                        match kind {
                            Bcast::Same => gb.iter_mut().zip(g).for_each(|(d, x)| *d += x),
                            Bcast::Scalar => gb[0] += g.iter().sum::<f32>(),
                            Bcast::RowVec => {
                                for row in g.chunks(blen) {
                                    gb.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                                }
                            }
                        }
                    }
                }
                Op::Mul { a, b } if a.0 == b.0 => {
                    // x * x: d/dx = 2 x g
                    let xn = &mut before[a.0];
                    if xn.requires_grad {
                        let xv = xn.data.clone();
                        let gx = grad_buf(xn);
                        gx.iter_mut().zip(g.iter().zip(&xv)).for_each(|(d, (v, x))| *d += 2.0 * v * x);
                    }
                }
                Op::Mul { a, b } => {
                    let kind = bcast_of(&before[a.0].shape, &before[b.0].shape);
                    if before[a.0].requires_grad {
                        let (ga_idx, other) = (a.0, b.0);
                        let (lo, hi) = split_two(before, ga_idx, other);
                        let bv = &hi.data;
                        let ga = grad_buf(lo);
                        match kind {
                            Bcast::Same => ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (x, y))| *d += x * y),
                            Bcast::Scalar => {
                                let s = bv[0];
                                ga.iter_mut().zip(g).for_each(|(d, x)| *d += x * s);
                            }
                            Bcast::RowVec => {
                                let c = bv.len();
                                for (grow, arow) in g.chunks(c).zip(ga.chunks_mut(c)) {
                                    arow.iter_mut().zip(grow.iter().zip(bv)).for_each(|(d, (x, y))| *d += x * y);
                                }
                            }
                        }
                    }
                    if before[b.0].requires_grad {
                        let (lo, hi) = split_two(before, b.0, a.0);
                        let av = &hi.data;
                        let gb = grad_buf(lo);
                        match kind {
                            Bcast::Same => gb.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (x, y))| *d += x * y),
                            Bcast::Scalar => gb[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f32>(),
                            Bcast::RowVec => {
                                let c = gb.len();
                                for (grow, arow) in g.chunks(c).zip(av.chunks(c)) {
                                    gb.iter_mut().zip(grow.iter().zip(arow)).for_each(|(d, (x, y))| *d += x * y);
                                }
                            }
                        }
                    }
                }
                Op::Affine { x, mul } => {
                    let m = *mul;
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let gx = grad_buf(xn);
                        gx.iter_mut().zip(g).for_each(|(d, v)| *d += m * v);
                    }
                }
                Op::Sigmoid { x } => {
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let gx = grad_buf(xn);
                        gx.iter_mut().zip(g.iter().zip(out_data)).for_each(|(d, (v, y))| *d += v * y * (1.0 - y));
                    }
                }
                Op::Silu { x, sigma } => {
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let xv: Vec<f32> = xn.data.clone();
                        let gx = grad_buf(xn);
                        for (((d, v), s), xi) in gx.iter_mut().zip(g).zip(sigma).zip(&xv) {
                            *d += v * s * (1.0 + xi * (1.0 - s));
                        }
                    }
                }
                Op::Log { x } => {
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let xv = xn.data.clone();
                        let gx = grad_buf(xn);
                        gx.iter_mut().zip(g.iter().zip(&xv)).for_each(|(d, (v, xi))| *d += v / xi);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let xv = xn.data.clone();
                        let gx = grad_buf(xn);
                        for ((d, v), xi) in gx.iter_mut().zip(g).zip(&xv) {
                            if *xi > lo && *xi < hi {
                                *d += v;
                            }
                        }
                    }
                }
                Op::SoftmaxLast { x } => {
                    let c = *out_shape.last().unwrap();
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let gx = grad_buf(xn);
                        for ((gx_row, g_row), p_row) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out_data.chunks(c)) {
                            let dot: f32 = g_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                            for ((d, &gv), &p) in gx_row.iter_mut().zip(g_row).zip(p_row) {
                                *d += p * (gv - dot);
                            }
                        }
                    }
                }
                Op::RmsNorm { x, divisor, inv_rms } => {
                    let c = out_shape[1];
                    let d_f = *divisor as f32;
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let xv = xn.data.clone();
                        let gx = grad_buf(xn);
                        for (((gx_row, g_row), x_row), &inv) in
                            gx.chunks_mut(c).zip(g.chunks(c)).zip(xv.chunks(c)).zip(inv_rms)
                        {
                            let dot: f32 = g_row.iter().zip(x_row).map(|(a, b)| a * b).sum();
                            let coef = dot * inv * inv * inv / d_f;
                            for ((d, &gv), &xi) in gx_row.iter_mut().zip(g_row).zip(x_row) {
                                *d += gv * inv - xi * coef;
                            }
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let d = out_shape[1];
                    let tn = &mut before[table.0];
                    if tn.requires_grad {
                        let gt = grad_buf(tn);
                        for (row, &id) in g.chunks(d).zip(ids) {
                            let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                            dst.iter_mut().zip(row).for_each(|(t, v)| *t += v);
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    match axis {
                        0 => {
                            let mut off = 0;
                            for &p in parts {
                                let len = before[p.0].data.len();
                                if before[p.0].requires_grad {
                                    let gp = grad_buf(&mut before[p.0]);
                                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(d, v)| *d += v);
                                }
                                off += len;
                            }
                        }
                        _ => {
                            let rows = out_shape[0];
                            let cols = out_shape[1];
                            let mut col_off = 0;
                            for &p in parts {
                                let pc = before[p.0].shape[1];
                                if before[p.0].requires_grad {
                                    let gp = grad_buf(&mut before[p.0]);
                                    for i2 in 0..rows {
                                        let src = &g[i2 * cols + col_off..i2 * cols + col_off + pc];
                                        gp[i2 * pc..(i2 + 1) * pc].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                                    }
                                }
                                col_off += pc;
                            }
                        }
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    let (axis, start, len) = (*axis, *start, *len);
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let xshape = xn.shape.clone();
                        let gx = grad_buf(xn);
                        match (xshape.len(), axis) {
                            (1, 0) => gx[start..start + len].iter_mut().zip(g).for_each(|(d, v)| *d += v),
                            (2, 0) => {
                                let c = xshape[1];
                                gx[start * c..(start + len) * c].iter_mut().zip(g).for_each(|(d, v)| *d += v);
                            }
                            _ => {
                                let (r, c) = (xshape[0], xshape[1]);
                                let _ = r;
                                for (i2, row) in g.chunks(len).enumerate() {
                                    gx[i2 * c + start..i2 * c + start + len]
                                        .iter_mut()
                                        .zip(row)
                                        .for_each(|(d, v)| *d += v);
                                }
                            }
                        }
                    }
                }
                Op::Rope { x, head_dim, positions, base } => {
                    let c = out_shape[1];
                    let half = head_dim / 2;
                    let freqs: Vec<f32> =
                        (0..half).map(|j| base.powf(-2.0 * j as f32 / *head_dim as f32)).collect();
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let gx = grad_buf(xn);
                        for ((gx_row, g_row), &pos) in gx.chunks_mut(c).zip(g.chunks(c)).zip(positions) {
                            for (gx_head, g_head) in gx_row.chunks_mut(*head_dim).zip(g_row.chunks(*head_dim)) {
                                for j in 0..half {
                                    let angle = pos as f32 * freqs[j];
                                    let (sin, cos) = angle.sin_cos();
                                    let ga = g_head[j];
                                    let gb = g_head[j + half];
                                    gx_head[j] += ga * cos + gb * sin;
                                    gx_head[j + half] += -ga * sin + gb * cos;
                                }
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, ignore, probs, n_kept } => {
                    if *n_kept == 0 {
                        continue;
                    }
                    let gscale = g[0] / *n_kept as f32;
                    let ln = &mut before[logits.0];
                    let v = ln.shape[1];
                    if ln.requires_grad {
                        let gl = grad_buf(ln);
                        for (((gl_row, p_row), &t), &ig) in
                            gl.chunks_mut(v).zip(probs.chunks(v)).zip(targets).zip(ignore)
                        {
                            if ig {
                                continue;
                            }
                            for (j, (d, &p)) in gl_row.iter_mut().zip(p_row).enumerate() {
                                let onehot = if j == t as usize { 1.0 } else { 0.0 };
                                *d += gscale * (p - onehot);
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    let xn = &mut before[x.0];
                    if xn.requires_grad {
                        let gv = g[0];
                        let gx = grad_buf(xn);
                        gx.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            if self.check_finite {
                // re-borrow: validate freshly written gradients
                let node = &self.nodes[i];
                if let Some(gr) = &node.grad {
                    if gr.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of {}", node.op.name())));
                    }
                }
            }
        }
        Ok(())
    }
}

fn bcast_of(sa: &[usize], sb: &[usize]) -> Bcast {
    if sa == sb {
        Bcast::Same
    } else if sb == [1] {
        Bcast::Scalar
    } else {
        Bcast::RowVec
    }
}

fn grad_buf(node: &mut Node) -> &mut [f32] {
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.data.len()]);
    }
    node.grad.as_mut().unwrap()
}

/// Mutable access to node `main` plus shared access to node `other`.
fn split_two(nodes: &mut [Node], main: usize, other: usize) -> (&mut Node, &Node) {
    if main < other {
        let (lo, hi) = nodes.split_at_mut(other);
        (&mut lo[main], &hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(main);
        (&mut hi[0], &lo[other])
    }
}
