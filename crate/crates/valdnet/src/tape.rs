//! Reverse-mode gradient tape and the differentiable operator set.
//!
//! Every forward operation appends a node holding the op, its input node ids
//! and the computed value. Nodes are created in topological order by
//! construction, so the backward pass is a single reverse sweep applying each
//! op's vector-Jacobian rule. All arithmetic is in f64; any non-finite value
//! produced by a forward op is surfaced as an error instead of propagating.

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Which operand of a binary elementwise op is the broadcast (smaller) one.
/// The smaller shape must be a leading prefix of the larger; each of its
/// elements spans a contiguous run of the larger tensor's trailing elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    LhsSmall,
    RhsSmall,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatVec { m: NodeId, v: NodeId },
    Add { a: NodeId, b: NodeId, bc: Broadcast },
    Mul { a: NodeId, b: NodeId, bc: Broadcast },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Swish { x: NodeId },
    Relu { x: NodeId },
    Conv2d { input: NodeId, kernel: NodeId, geom: ConvGeom },
    DepthwiseConv2d { input: NodeId, kernel: NodeId, geom: ConvGeom },
    GlobalAvgPool { x: NodeId },
    MeanRows { x: NodeId },
    Row { x: NodeId, index: usize },
    StackRows { rows: Vec<NodeId> },
    ConcatVec { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    // The shift contributes nothing to the gradient, so only scale is kept.
    Affine { x: NodeId, scale: f64 },
    BceLoss { p: NodeId, target: f64 },
}

/// Resolved convolution geometry, computed once at record time.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the node ids of the
/// consumed tape. Every `requires_grad` leaf has an entry, zero-filled when
/// no gradient flowed to it.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads[id.0].take()
    }

    /// Copy the gradient for `id` into the tensor's grad buffer.
    pub fn write_into(&self, id: NodeId, tensor: &mut Tensor) {
        tensor.grad = self.grads[id.0].clone();
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Record an input value. Its `requires_grad` flag decides whether the
    /// backward pass reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        let (shape, data) = t.into_parts();
        self.push(Op::Leaf, shape, data, needs)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Clone a node's value out as a tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape node holds a valid tensor")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, shape, data, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, what: &str) -> Result<NodeId> {
        check_finite(&data, what)?;
        let needs = op_inputs(&op).iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push(op, shape, data, needs))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// `a [M,K] · b [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dim(format!("matmul wants matrices, got {sa:?} x {sb:?}")));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dim(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let crow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        self.record(Op::MatMul { a, b }, vec![m, n], out, "matmul")
    }

    /// `m [M,K] · v [K] -> [M]`.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::Dim(format!("matvec shapes {sm:?} x {sv:?}")));
        }
        let (rows, k) = (sm[0], sm[1]);
        let (dm, dv) = (self.data(m), self.data(v));
        let out: Vec<f64> = (0..rows)
            .map(|i| dm[i * k..(i + 1) * k].iter().zip(dv).map(|(w, x)| w * x).sum())
            .collect();
        self.record(Op::MatVec { m, v }, vec![rows], out, "matvec")
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bc = broadcast_kind(self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let (out, shape) = match bc {
            Broadcast::None => (
                da.iter().zip(db).map(|(x, y)| x + y).collect(),
                self.shape(a).to_vec(),
            ),
            Broadcast::RhsSmall => (broadcast_add(da, db), self.shape(a).to_vec()),
            Broadcast::LhsSmall => (broadcast_add(db, da), self.shape(b).to_vec()),
        };
        self.record(Op::Add { a, b, bc }, shape, out, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bc = broadcast_kind(self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let (out, shape) = match bc {
            Broadcast::None => (
                da.iter().zip(db).map(|(x, y)| x * y).collect(),
                self.shape(a).to_vec(),
            ),
            Broadcast::RhsSmall => (broadcast_mul(da, db), self.shape(a).to_vec()),
            Broadcast::LhsSmall => (broadcast_mul(db, da), self.shape(b).to_vec()),
        };
        self.record(Op::Mul { a, b, bc }, shape, out, "mul")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Sigmoid { x }, shape, out, "sigmoid")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Tanh { x }, shape, out, "tanh")
    }

    /// swish(x) = x · sigmoid(x).
    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Swish { x }, shape, out, "swish")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Relu { x }, shape, out, "relu")
    }

    /// Elementwise `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Affine { x, scale }, shape, out, "affine")
    }

    // ── Convolutions ─────────────────────────────────────────────────

    /// `input [C_in,H,W]` ⊛ `kernel [C_out,C_in,kH,kW]` -> `[C_out,H',W']`,
    /// cross-correlation convention.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::Dim(format!("conv2d shapes {si:?} ⊛ {sk:?}")));
        }
        if si[0] != sk[1] {
            return Err(Error::Dim(format!(
                "conv2d input channels {} != kernel C_in {}",
                si[0], sk[1]
            )));
        }
        let (h, w) = (si[1], si[2]);
        let (c_out, c_in, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        let geom = conv_geom(h, w, kh, kw, stride, padding)?;
        let mut out = vec![0.0; c_out * geom.h_out * geom.w_out];
        let (din, dk) = (self.data(input), self.data(kernel));
        for o in 0..c_out {
            for c in 0..c_in {
                let kbase = (o * c_in + c) * kh * kw;
                conv_plane_forward(
                    &din[c * h * w..(c + 1) * h * w],
                    h,
                    w,
                    &dk[kbase..kbase + kh * kw],
                    kh,
                    kw,
                    geom,
                    &mut out[o * geom.h_out * geom.w_out..(o + 1) * geom.h_out * geom.w_out],
                );
            }
        }
        let shape = vec![c_out, geom.h_out, geom.w_out];
        self.record(Op::Conv2d { input, kernel, geom }, shape, out, "conv2d")
    }

    /// `input [C,H,W]` ⊛ `kernel [C,kH,kW]` -> `[C,H',W']`, each channel
    /// convolved with its own plane.
    pub fn depthwise_conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 3 {
            return Err(Error::Dim(format!("depthwise shapes {si:?} ⊛ {sk:?}")));
        }
        if si[0] != sk[0] {
            return Err(Error::Dim(format!(
                "depthwise channel counts differ: input {} kernel {}",
                si[0], sk[0]
            )));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (kh, kw) = (sk[1], sk[2]);
        let geom = conv_geom(h, w, kh, kw, stride, padding)?;
        let mut out = vec![0.0; c * geom.h_out * geom.w_out];
        let (din, dk) = (self.data(input), self.data(kernel));
        for ch in 0..c {
            conv_plane_forward(
                &din[ch * h * w..(ch + 1) * h * w],
                h,
                w,
                &dk[ch * kh * kw..(ch + 1) * kh * kw],
                kh,
                kw,
                geom,
                &mut out[ch * geom.h_out * geom.w_out..(ch + 1) * geom.h_out * geom.w_out],
            );
        }
        let shape = vec![c, geom.h_out, geom.w_out];
        self.record(Op::DepthwiseConv2d { input, kernel, geom }, shape, out, "depthwise_conv2d")
    }

    // ── Reductions and shape ops ─────────────────────────────────────

    /// `[C,H,W] -> [C]`, per-channel spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Dim(format!("global_avg_pool wants [C,H,W], got {s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let d = self.data(x);
        let out: Vec<f64> = (0..c)
            .map(|ch| d[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.record(Op::GlobalAvgPool { x }, vec![c], out, "global_avg_pool")
    }

    /// `[T,D] -> [D]`, mean over rows.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dim(format!("mean_rows wants [T,D], got {s:?}")));
        }
        let (t, d) = (s[0], s[1]);
        let data = self.data(x);
        let mut out = vec![0.0; d];
        for row in 0..t {
            for j in 0..d {
                out[j] += data[row * d + j];
            }
        }
        for v in &mut out {
            *v /= t as f64;
        }
        self.record(Op::MeanRows { x }, vec![d], out, "mean_rows")
    }

    /// Row `index` of a `[T,D]` tensor as a `[D]` vector.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || index >= s[0] {
            return Err(Error::Dim(format!("row {index} of {s:?}")));
        }
        let d = s[1];
        let out = self.data(x)[index * d..(index + 1) * d].to_vec();
        self.record(Op::Row { x, index }, vec![d], out, "row")
    }

    /// Stack T equal-length vectors into a `[T,D]` tensor.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows of empty sequence".into()));
        }
        let d = self.shape(rows[0]).to_vec();
        if d.len() != 1 {
            return Err(Error::Dim(format!("stack_rows wants vectors, got {d:?}")));
        }
        let mut out = Vec::with_capacity(rows.len() * d[0]);
        for &r in rows {
            if self.shape(r) != d.as_slice() {
                return Err(Error::Dim("stack_rows with heterogeneous shapes".into()));
            }
            out.extend_from_slice(self.data(r));
        }
        let shape = vec![rows.len(), d[0]];
        self.record(Op::StackRows { rows: rows.to_vec() }, shape, out, "stack_rows")
    }

    /// Concatenate two vectors.
    pub fn concat_vec(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::Dim(format!("concat_vec wants vectors, got {sa:?}, {sb:?}")));
        }
        let shape = vec![sa[0] + sb[0]];
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        self.record(Op::ConcatVec { a, b }, shape, out, "concat_vec")
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.data(x).iter().sum();
        self.record(Op::Sum { x }, vec![1], vec![total], "sum")
    }

    /// Binary cross-entropy of a probability against a {0,1} target, with the
    /// probability clamped to [1e-7, 1-1e-7] before the logs.
    pub fn bce_loss(&mut self, p: NodeId, target: f64) -> Result<NodeId> {
        if self.data(p).len() != 1 {
            return Err(Error::Contract("bce_loss wants a scalar probability".into()));
        }
        if target != 0.0 && target != 1.0 {
            return Err(Error::Contract(format!("bce_loss target must be 0 or 1, got {target}")));
        }
        let q = self.data(p)[0].clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(target * q.ln() + (1.0 - target) * (1.0 - q).ln());
        self.record(Op::BceLoss { p, target }, vec![1], vec![loss], "bce_loss")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape and returns the
    /// accumulated gradients; every `requires_grad` leaf is guaranteed an
    /// entry (zeros when no gradient reached it).
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_op(i, &gout, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Skips the contribution to any input that no gradient consumer needs.
        macro_rules! slot {
            ($id:expr) => {{
                let id: NodeId = $id;
                if !self.nodes[id.0].needs_grad {
                    None
                } else {
                    Some(
                        grads[id.0]
                            .get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]),
                    )
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(*b)[1];
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot!(*a) {
                    for r in 0..m {
                        let grow = &gout[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[r * k + p] += acc;
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for r in 0..m {
                        let grow = &gout[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = da[r * k + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                gbrow[j] += arp * grow[j];
                            }
                        }
                    }
                }
            }
            Op::MatVec { m, v } => {
                let sm = self.shape(*m);
                let (rows, k) = (sm[0], sm[1]);
                let (dm, dv) = (self.data(*m), self.data(*v));
                if let Some(gm) = slot!(*m) {
                    for r in 0..rows {
                        let g = gout[r];
                        let grow = &mut gm[r * k..(r + 1) * k];
                        for p in 0..k {
                            grow[p] += g * dv[p];
                        }
                    }
                }
                if let Some(gv) = slot!(*v) {
                    for r in 0..rows {
                        let g = gout[r];
                        let wrow = &dm[r * k..(r + 1) * k];
                        for p in 0..k {
                            gv[p] += g * wrow[p];
                        }
                    }
                }
            }
            Op::Add { a, b, bc } => {
                let (big, small) = match bc {
                    Broadcast::None | Broadcast::RhsSmall => (*a, *b),
                    Broadcast::LhsSmall => (*b, *a),
                };
                if let Some(g) = slot!(big) {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
                if let Some(g) = slot!(small) {
                    if *bc == Broadcast::None {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    } else {
                        let trail = gout.len() / g.len();
                        for (s_idx, gi) in g.iter_mut().enumerate() {
                            *gi += gout[s_idx * trail..(s_idx + 1) * trail].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Mul { a, b, bc } => {
                let (big, small) = match bc {
                    Broadcast::None | Broadcast::RhsSmall => (*a, *b),
                    Broadcast::LhsSmall => (*b, *a),
                };
                let (dbig, dsmall) = (self.data(big), self.data(small));
                if *bc == Broadcast::None {
                    if let Some(g) = slot!(big) {
                        for j in 0..g.len() {
                            g[j] += gout[j] * dsmall[j];
                        }
                    }
                    if let Some(g) = slot!(small) {
                        for j in 0..g.len() {
                            g[j] += gout[j] * dbig[j];
                        }
                    }
                } else {
                    let trail = dbig.len() / dsmall.len();
                    if let Some(g) = slot!(big) {
                        for (s_idx, &sv) in dsmall.iter().enumerate() {
                            let range = s_idx * trail..(s_idx + 1) * trail;
                            for j in range {
                                g[j] += gout[j] * sv;
                            }
                        }
                    }
                    if let Some(g) = slot!(small) {
                        for (s_idx, gi) in g.iter_mut().enumerate() {
                            let range = s_idx * trail..(s_idx + 1) * trail;
                            let mut acc = 0.0;
                            for j in range {
                                acc += gout[j] * dbig[j];
                            }
                            *gi += acc;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].data;
                if let Some(g) = slot!(*x) {
                    for j in 0..g.len() {
                        g[j] += gout[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Tanh { x } => {
                let y = &self.nodes[i].data;
                if let Some(g) = slot!(*x) {
                    for j in 0..g.len() {
                        g[j] += gout[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Swish { x } => {
                let xin = self.data(*x);
                if let Some(g) = slot!(*x) {
                    for j in 0..g.len() {
                        let s = sigmoid(xin[j]);
                        g[j] += gout[j] * s * (1.0 + xin[j] * (1.0 - s));
                    }
                }
            }
            Op::Relu { x } => {
                let xin = self.data(*x);
                if let Some(g) = slot!(*x) {
                    for j in 0..g.len() {
                        if xin[j] > 0.0 {
                            g[j] += gout[j];
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let si = self.shape(*input).to_vec();
                let sk = self.shape(*kernel).to_vec();
                let (h, w) = (si[1], si[2]);
                let (c_out, c_in, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
                let din = self.data(*input);
                let dk = self.data(*kernel);
                let plane_out = geom.h_out * geom.w_out;
                if let Some(gi) = slot!(*input) {
                    for o in 0..c_out {
                        let gplane = &gout[o * plane_out..(o + 1) * plane_out];
                        for c in 0..c_in {
                            let kbase = (o * c_in + c) * kh * kw;
                            conv_plane_backward_input(
                                &mut gi[c * h * w..(c + 1) * h * w],
                                h,
                                w,
                                &dk[kbase..kbase + kh * kw],
                                kh,
                                kw,
                                *geom,
                                gplane,
                            );
                        }
                    }
                }
                if let Some(gk) = slot!(*kernel) {
                    for o in 0..c_out {
                        let gplane = &gout[o * plane_out..(o + 1) * plane_out];
                        for c in 0..c_in {
                            let kbase = (o * c_in + c) * kh * kw;
                            conv_plane_backward_kernel(
                                &din[c * h * w..(c + 1) * h * w],
                                h,
                                w,
                                &mut gk[kbase..kbase + kh * kw],
                                kh,
                                kw,
                                *geom,
                                gplane,
                            );
                        }
                    }
                }
            }
            Op::DepthwiseConv2d { input, kernel, geom } => {
                let si = self.shape(*input).to_vec();
                let sk = self.shape(*kernel).to_vec();
                let (c, h, w) = (si[0], si[1], si[2]);
                let (kh, kw) = (sk[1], sk[2]);
                let din = self.data(*input);
                let dk = self.data(*kernel);
                let plane_out = geom.h_out * geom.w_out;
                if let Some(gi) = slot!(*input) {
                    for ch in 0..c {
                        conv_plane_backward_input(
                            &mut gi[ch * h * w..(ch + 1) * h * w],
                            h,
                            w,
                            &dk[ch * kh * kw..(ch + 1) * kh * kw],
                            kh,
                            kw,
                            *geom,
                            &gout[ch * plane_out..(ch + 1) * plane_out],
                        );
                    }
                }
                if let Some(gk) = slot!(*kernel) {
                    for ch in 0..c {
                        conv_plane_backward_kernel(
                            &din[ch * h * w..(ch + 1) * h * w],
                            h,
                            w,
                            &mut gk[ch * kh * kw..(ch + 1) * kh * kw],
                            kh,
                            kw,
                            *geom,
                            &gout[ch * plane_out..(ch + 1) * plane_out],
                        );
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                let inv = 1.0 / hw as f64;
                if let Some(g) = slot!(*x) {
                    for (ch, &go) in gout.iter().enumerate() {
                        let contrib = go * inv;
                        for v in &mut g[ch * hw..(ch + 1) * hw] {
                            *v += contrib;
                        }
                    }
                }
            }
            Op::MeanRows { x } => {
                let s = self.shape(*x);
                let (t, d) = (s[0], s[1]);
                let inv = 1.0 / t as f64;
                if let Some(g) = slot!(*x) {
                    for row in 0..t {
                        for j in 0..d {
                            g[row * d + j] += gout[j] * inv;
                        }
                    }
                }
            }
            Op::Row { x, index } => {
                let d = self.shape(*x)[1];
                if let Some(g) = slot!(*x) {
                    for j in 0..d {
                        g[index * d + j] += gout[j];
                    }
                }
            }
            Op::StackRows { rows } => {
                let d = self.shape(rows[0])[0];
                for (r, &row_id) in rows.iter().enumerate() {
                    if let Some(g) = slot!(row_id) {
                        for j in 0..d {
                            g[j] += gout[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatVec { a, b } => {
                let na = self.shape(*a)[0];
                if let Some(g) = slot!(*a) {
                    for j in 0..na {
                        g[j] += gout[j];
                    }
                }
                if let Some(g) = slot!(*b) {
                    for (j, gi) in g.iter_mut().enumerate() {
                        *gi += gout[na + j];
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(g) = slot!(*x) {
                    for v in g.iter_mut() {
                        *v += gout[0];
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(g) = slot!(*x) {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go * scale;
                    }
                }
            }
            Op::BceLoss { p, target } => {
                let pv = self.data(*p)[0];
                if let Some(g) = slot!(*p) {
                    if pv > BCE_EPS && pv < 1.0 - BCE_EPS {
                        let q = pv;
                        g[0] += gout[0] * (-target / q + (1.0 - target) / (1.0 - q));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) const BCE_EPS: f64 = 1e-7;

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b }
        | Op::Add { a, b, .. }
        | Op::Mul { a, b, .. }
        | Op::ConcatVec { a, b } => vec![*a, *b],
        Op::MatVec { m, v } => vec![*m, *v],
        Op::Sigmoid { x }
        | Op::Tanh { x }
        | Op::Swish { x }
        | Op::Relu { x }
        | Op::GlobalAvgPool { x }
        | Op::MeanRows { x }
        | Op::Row { x, .. }
        | Op::Sum { x }
        | Op::Affine { x, .. } => vec![*x],
        Op::Conv2d { input, kernel, .. } | Op::DepthwiseConv2d { input, kernel, .. } => {
            vec![*input, *kernel]
        }
        Op::StackRows { rows } => rows.clone(),
        Op::BceLoss { p, .. } => vec![*p],
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_kind(sa: &[usize], sb: &[usize]) -> Result<Broadcast> {
    if sa == sb {
        return Ok(Broadcast::None);
    }
    if sb.len() < sa.len() && sa[..sb.len()] == *sb {
        return Ok(Broadcast::RhsSmall);
    }
    if sa.len() < sb.len() && sb[..sa.len()] == *sa {
        return Ok(Broadcast::LhsSmall);
    }
    Err(Error::Dim(format!(
        "broadcast failure: {sa:?} vs {sb:?} (smaller shape must be a leading prefix)"
    )))
}

fn broadcast_add(big: &[f64], small: &[f64]) -> Vec<f64> {
    let trail = big.len() / small.len();
    let mut out = big.to_vec();
    for (s_idx, &sv) in small.iter().enumerate() {
        for v in &mut out[s_idx * trail..(s_idx + 1) * trail] {
            *v += sv;
        }
    }
    out
}

fn broadcast_mul(big: &[f64], small: &[f64]) -> Vec<f64> {
    let trail = big.len() / small.len();
    let mut out = big.to_vec();
    for (s_idx, &sv) in small.iter().enumerate() {
        for v in &mut out[s_idx * trail..(s_idx + 1) * trail] {
            *v *= sv;
        }
    }
    out
}

/// Output extents and padding for one convolution. "Same" pads symmetrically
/// with the extra pixel on the bottom/right when the total is odd.
fn conv_geom(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if stride < 1 {
        return Err(Error::Contract("conv stride must be >= 1".into()));
    }
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::Dim(format!(
                    "kernel {kh}x{kw} exceeds input {h}x{w} under valid padding"
                )));
            }
            Ok(ConvGeom {
                stride,
                pad_top: 0,
                pad_left: 0,
                h_out: (h - kh) / stride + 1,
                w_out: (w - kw) / stride + 1,
            })
        }
        Padding::Same => {
            let h_out = h.div_ceil(stride);
            let w_out = w.div_ceil(stride);
            let total_h = ((h_out - 1) * stride + kh).saturating_sub(h);
            let total_w = ((w_out - 1) * stride + kw).saturating_sub(w);
            if kh > h + total_h || kw > w + total_w {
                return Err(Error::Dim(format!(
                    "kernel {kh}x{kw} exceeds padded input under same padding"
                )));
            }
            Ok(ConvGeom {
                stride,
                pad_top: total_h / 2,
                pad_left: total_w / 2,
                h_out,
                w_out,
            })
        }
    }
}

/// The x-range of output columns whose sampled input column lands in [0, w).
fn col_range(w: usize, w_out: usize, stride: usize, xoff: isize) -> (usize, usize) {
    // x*stride + xoff in [0, w)
    let lo = if xoff >= 0 {
        0
    } else {
        ((-xoff) as usize).div_ceil(stride)
    };
    let max_ix = w as isize - 1 - xoff;
    if max_ix < 0 {
        return (0, 0);
    }
    let hi = (max_ix as usize / stride + 1).min(w_out);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_plane_forward(
    input: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    out: &mut [f64],
) {
    let s = geom.stride;
    for i in 0..kh {
        for y in 0..geom.h_out {
            let iy = (y * s + i) as isize - geom.pad_top as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let in_row = &input[iy as usize * w..(iy as usize + 1) * w];
            let out_row = &mut out[y * geom.w_out..(y + 1) * geom.w_out];
            for j in 0..kw {
                let kv = kernel[i * kw + j];
                let xoff = j as isize - geom.pad_left as isize;
                let (lo, hi) = col_range(w, geom.w_out, s, xoff);
                for x in lo..hi {
                    out_row[x] += kv * in_row[((x * s) as isize + xoff) as usize];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_plane_backward_input(
    ginput: &mut [f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    gout: &[f64],
) {
    let s = geom.stride;
    for i in 0..kh {
        for y in 0..geom.h_out {
            let iy = (y * s + i) as isize - geom.pad_top as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let gin_row = &mut ginput[iy as usize * w..(iy as usize + 1) * w];
            let gout_row = &gout[y * geom.w_out..(y + 1) * geom.w_out];
            for j in 0..kw {
                let kv = kernel[i * kw + j];
                let xoff = j as isize - geom.pad_left as isize;
                let (lo, hi) = col_range(w, geom.w_out, s, xoff);
                for x in lo..hi {
                    gin_row[((x * s) as isize + xoff) as usize] += kv * gout_row[x];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_plane_backward_kernel(
    input: &[f64],
    h: usize,
    w: usize,
    gkernel: &mut [f64],
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    gout: &[f64],
) {
    let s = geom.stride;
    for i in 0..kh {
        for j in 0..kw {
            let xoff = j as isize - geom.pad_left as isize;
            let (lo, hi) = col_range(w, geom.w_out, s, xoff);
            let mut acc = 0.0;
            for y in 0..geom.h_out {
                let iy = (y * s + i) as isize - geom.pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let in_row = &input[iy as usize * w..(iy as usize + 1) * w];
                let gout_row = &gout[y * geom.w_out..(y + 1) * geom.w_out];
                for x in lo..hi {
                    acc += gout_row[x] * in_row[((x * s) as isize + xoff) as usize];
                }
            }
            gkernel[i * kw + j] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::new(shape, data).unwrap())
    }

    /// Nested-loop convolution over an explicitly materialized padded buffer.
    /// Kept deliberately naive and separate from the production kernels.
    fn brute_conv2d(
        input: &[f64],
        (ci, h, w): (usize, usize, usize),
        kernel: &[f64],
        (co, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: (usize, usize, usize, usize), // top, bottom, left, right
    ) -> (Vec<f64>, usize, usize) {
        let (pt, pb, pl, pr) = pad;
        let (ph, pw) = (h + pt + pb, w + pl + pr);
        let mut padded = vec![0.0; ci * ph * pw];
        for c in 0..ci {
            for y in 0..h {
                for x in 0..w {
                    padded[c * ph * pw + (y + pt) * pw + (x + pl)] = input[c * h * w + y * w + x];
                }
            }
        }
        let h_out = (ph - kh) / stride + 1;
        let w_out = (pw - kw) / stride + 1;
        let mut out = vec![0.0; co * h_out * w_out];
        for o in 0..co {
            for y in 0..h_out {
                for x in 0..w_out {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                acc += padded[c * ph * pw + (y * stride + i) * pw + x * stride + j]
                                    * kernel[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[o * h_out * w_out + y * w_out + x] = acc;
                }
            }
        }
        (out, h_out, w_out)
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3, 3], (1..=9).map(f64::from).collect());
        let k = leaf(&mut tape, vec![1, 1, 1, 1], vec![1.0]);
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
        assert_eq!(tape.shape(y), &[1, 3, 3]);
    }

    #[test]
    fn conv2d_hand_case() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = leaf(&mut tape, vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.data(y), &[5.0]);
    }

    #[test]
    fn conv2d_zero_kernel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3, 3], (0..18).map(f64::from).collect());
        let k = leaf(&mut tape, vec![3, 2, 2, 2], vec![0.0; 24]);
        let y = tape.conv2d(x, k, 1, Padding::Same).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_channel_mismatch_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3, 3], vec![0.0; 18]);
        let k = leaf(&mut tape, vec![1, 3, 2, 2], vec![0.0; 12]);
        assert!(matches!(tape.conv2d(x, k, 1, Padding::Valid), Err(Error::Dim(_))));
    }

    #[test]
    fn conv2d_oversized_kernel_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2, 2], vec![0.0; 4]);
        let k = leaf(&mut tape, vec![1, 1, 3, 3], vec![0.0; 9]);
        assert!(tape.conv2d(x, k, 1, Padding::Valid).is_err());
    }

    #[test]
    fn conv2d_matches_brute_force_on_seeded_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for case in 0..100 {
            let ci = rng.gen_range(1..=3);
            let co = rng.gen_range(1..=3);
            let h = rng.gen_range(1..=5);
            let w = rng.gen_range(1..=5);
            let kh = rng.gen_range(1..=h);
            let kw = rng.gen_range(1..=w);
            let stride = rng.gen_range(1..=2);
            let same = rng.gen_bool(0.5);
            let input: Vec<f64> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kernel: Vec<f64> =
                (0..co * ci * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut tape = Tape::new();
            let x = leaf(&mut tape, vec![ci, h, w], input.clone());
            let k = leaf(&mut tape, vec![co, ci, kh, kw], kernel.clone());
            let pad = if same { Padding::Same } else { Padding::Valid };
            let y = tape.conv2d(x, k, stride, pad).unwrap();

            let pads = if same {
                let g = conv_geom(h, w, kh, kw, stride, Padding::Same).unwrap();
                let th = ((g.h_out - 1) * stride + kh).saturating_sub(h);
                let tw = ((g.w_out - 1) * stride + kw).saturating_sub(w);
                (g.pad_top, th - g.pad_top, g.pad_left, tw - g.pad_left)
            } else {
                (0, 0, 0, 0)
            };
            let (expect, eh, ew) =
                brute_conv2d(&input, (ci, h, w), &kernel, (co, kh, kw), stride, pads);
            assert_eq!(tape.shape(y), &[co, eh, ew], "case {case}");
            for (a, b) in tape.data(y).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn same_padding_puts_extra_pixel_bottom_right() {
        // 4x4 input, 2x2 kernel, stride 1: total pad 1 -> top/left 0, bottom/right 1.
        let g = conv_geom(4, 4, 2, 2, 1, Padding::Same).unwrap();
        assert_eq!((g.h_out, g.w_out), (4, 4));
        assert_eq!((g.pad_top, g.pad_left), (0, 0));

        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = leaf(&mut tape, vec![1, 1, 2, 2], vec![0.0, 0.0, 0.0, 1.0]);
        // Kernel picks the bottom-right tap; with pad on the bottom/right the
        // last row/column reads zeros.
        let y = tape.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(tape.data(y), &[4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn depthwise_single_channel_equals_conv2d() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let input: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernel: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut t1 = Tape::new();
        let x1 = leaf(&mut t1, vec![1, 4, 4], input.clone());
        let k1 = leaf(&mut t1, vec![1, 3, 3], kernel.clone());
        let y1 = t1.depthwise_conv2d(x1, k1, 1, Padding::Valid).unwrap();

        let mut t2 = Tape::new();
        let x2 = leaf(&mut t2, vec![1, 4, 4], input);
        let k2 = leaf(&mut t2, vec![1, 1, 3, 3], kernel);
        let y2 = t2.conv2d(x2, k2, 1, Padding::Valid).unwrap();

        assert_eq!(t1.data(y1), t2.data(y2));
    }

    #[test]
    fn depthwise_identity_kernels_pass_input_through() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let k = leaf(&mut tape, vec![2, 1, 1], vec![1.0, 1.0]);
        let y = tape.depthwise_conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn depthwise_matches_per_channel_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let input: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernel: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 4, 4], input.clone());
        let k = leaf(&mut tape, vec![2, 3, 3], kernel.clone());
        let y = tape.depthwise_conv2d(x, k, 1, Padding::Valid).unwrap();

        for c in 0..2 {
            let (expect, _, _) = brute_conv2d(
                &input[c * 16..(c + 1) * 16],
                (1, 4, 4),
                &kernel[c * 9..(c + 1) * 9],
                (1, 3, 3),
                1,
                (0, 0, 0, 0),
            );
            assert_eq!(&tape.data(y)[c * 4..(c + 1) * 4], &expect[..]);
        }
    }

    #[test]
    fn depthwise_channel_mismatch_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3, 3], vec![0.0; 18]);
        let k = leaf(&mut tape, vec![3, 2, 2], vec![0.0; 12]);
        assert!(matches!(tape.depthwise_conv2d(x, k, 1, Padding::Valid), Err(Error::Dim(_))));
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = leaf(
            &mut tape,
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let x = leaf(&mut tape, vec![3, 2], (1..=6).map(f64::from).collect());
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![5.0, 6.0]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(y), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let x = leaf(&mut tape, vec![2, 3], (1..=6).map(f64::from).collect());
        let y = tape.matmul(z, x).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_dimension_error() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(tape.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![0.0]);
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(x).unwrap();
        let w = tape.swish(x).unwrap();
        assert_eq!(tape.data(s), &[0.5]);
        assert_eq!(tape.data(t), &[0.0]);
        assert_eq!(tape.data(w), &[0.0]);
    }

    #[test]
    fn channel_broadcast_mul() {
        let mut tape = Tape::new();
        let gate = leaf(&mut tape, vec![1], vec![2.0]);
        let map = leaf(&mut tape, vec![1, 2, 2], vec![1.0; 4]);
        let y = tape.mul(map, gate).unwrap();
        assert_eq!(tape.data(y), &[2.0; 4]);
        // Same result with operands flipped.
        let y2 = tape.mul(gate, map).unwrap();
        assert_eq!(tape.data(y2), &[2.0; 4]);
    }

    #[test]
    fn broadcast_failure_errors() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![3, 2], vec![0.0; 6]);
        assert!(matches!(tape.mul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn global_avg_pool_cases() {
        let mut tape = Tape::new();
        let c = leaf(&mut tape, vec![2, 2, 2], vec![3.0; 8]);
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.data(y), &[3.0, 3.0]);

        let m = leaf(&mut tape, vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let y2 = tape.global_avg_pool(m).unwrap();
        assert_eq!(tape.data(y2), &[4.0]);

        let one = leaf(&mut tape, vec![1, 1, 1], vec![9.5]);
        let y3 = tape.global_avg_pool(one).unwrap();
        assert_eq!(tape.data(y3), &[9.5]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad(),
        );
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_of_sigmoid_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap().with_grad());
        let s = tape.sigmoid(w).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn no_flow_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let unused = tape.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap().with_grad());
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(42);
            let input: Vec<f64> = (0..2 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kernel: Vec<f64> = (0..4 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let x = leaf(&mut tape, vec![2, 6, 6], input);
            let k = leaf(&mut tape, vec![4, 2, 3, 3], kernel);
            let c = tape.conv2d(x, k, 2, Padding::Same).unwrap();
            let a = tape.swish(c).unwrap();
            let p = tape.global_avg_pool(a).unwrap();
            tape.data(p).to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "identical seeds must give bit-identical outputs");
    }

    #[test]
    fn bce_loss_values() {
        let mut tape = Tape::new();
        let half = leaf(&mut tape, vec![1], vec![0.5]);
        let l = tape.bce_loss(half, 1.0).unwrap();
        assert!((tape.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let near_one = leaf(&mut tape, vec![1], vec![1.0 - 1e-7]);
        let l2 = tape.bce_loss(near_one, 1.0).unwrap();
        assert!((tape.data(l2)[0] - 1e-7).abs() < 1e-9);

        let near_zero = leaf(&mut tape, vec![1], vec![1e-7]);
        let l3 = tape.bce_loss(near_zero, 1.0).unwrap();
        // -ln(1e-7) = 7 ln 10
        assert!((tape.data(l3)[0] - 16.11809565095832).abs() < 1e-9);
    }
}
