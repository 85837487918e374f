//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive computes its value eagerly and, when recording and at
//! least one input is tracked, appends a node holding the inputs it needs
//! for the vector-Jacobian product. `backward` walks the nodes once in
//! reverse order. Untracked computations (`Tape::inference`) keep nothing
//! alive beyond the `Var`s the caller holds.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::dft::{Complex, DftPlan};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

static NEXT_EPOCH: AtomicU64 = AtomicU64::new(1);

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    epoch: u64,
    id: usize,
}

/// A value on (or off) a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<NodeRef>,
}

impl Var {
    /// A value that never receives a gradient.
    pub fn constant(t: Tensor) -> Self {
        Self {
            value: Arc::new(t),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }
}

/// Cosine/sine table for rotary embeddings: `[positions, pairs]`.
#[derive(Clone, Debug)]
pub struct RotaryTable {
    pub(crate) pairs: usize,
    pub(crate) positions: usize,
    pub(crate) cos: Vec<f64>,
    pub(crate) sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(head_dim: usize, positions: usize, base: f64) -> Self {
        assert!(head_dim.is_multiple_of(2), "rotary head dimension must be even");
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * pairs);
        let mut sin = Vec::with_capacity(positions * pairs);
        for p in 0..positions {
            for k in 0..pairs {
                let theta = base.powf(-2.0 * k as f64 / head_dim as f64);
                let a = p as f64 * theta;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Self {
            pairs,
            positions,
            cos,
            sin,
        }
    }

    pub fn head_dim(&self) -> usize {
        2 * self.pairs
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Rotate one head-sized vector to `pos` (or back, with `inverse`).
    pub fn rotate(&self, v: &mut [f64], pos: usize, inverse: bool) {
        debug_assert_eq!(v.len(), 2 * self.pairs);
        let base = pos * self.pairs;
        for k in 0..self.pairs {
            let c = self.cos[base + k];
            let s = if inverse {
                -self.sin[base + k]
            } else {
                self.sin[base + k]
            };
            let (x0, x1) = (v[2 * k], v[2 * k + 1]);
            v[2 * k] = x0 * c - x1 * s;
            v[2 * k + 1] = x0 * s + x1 * c;
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Tensor>),
    Gelu { x: Var, tanh: Vec<f64> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Rope {
        x: Var,
        table: Arc<RotaryTable>,
        positions: Arc<Vec<usize>>,
    },
    ChannelBias {
        scores: Var,
        same: Var,
        diff: Var,
        head: usize,
        q_channels: Arc<Vec<usize>>,
        k_channels: Arc<Vec<usize>>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    ScatterRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    FillMasked {
        enc: Var,
        token: Var,
        mask: Arc<Vec<bool>>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        cols: Vec<f64>,
        stride: usize,
        padding: usize,
        l_out: usize,
    },
    DepthwiseConv2d {
        x: Var,
        kernel: Var,
    },
    DftMagnitude {
        x: Var,
        spectrum: Vec<Complex>,
        plan: Arc<DftPlan>,
    },
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
}

struct Node {
    op: Op,
    out: Arc<Tensor>,
    param: Option<ParamId>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
    epoch: u64,
}

impl Gradients {
    /// Gradient of a leaf created with `Tape::leaf`.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        let n = v.node?;
        if n.epoch != self.epoch {
            return None;
        }
        self.leaves.get(&n.id)
    }

    /// Summed gradient over every use of a parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    epoch: u64,
    plans: HashMap<usize, Arc<DftPlan>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            epoch: NEXT_EPOCH.fetch_add(1, Ordering::Relaxed),
            plans: HashMap::new(),
        }
    }

    /// A tape that never records; every result is a constant.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes. Vars from before the clear become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.epoch = NEXT_EPOCH.fetch_add(1, Ordering::Relaxed);
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_leaf(store.shared(id), Some(id))
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, param: Option<ParamId>) -> Var {
        if !self.recording {
            return Var { value, node: None };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            out: Arc::clone(&value),
            param,
        });
        Var {
            value,
            node: Some(NodeRef {
                epoch: self.epoch,
                id,
            }),
        }
    }

    fn dft_plan(&mut self, len: usize) -> Arc<DftPlan> {
        Arc::clone(
            self.plans
                .entry(len)
                .or_insert_with(|| Arc::new(DftPlan::new(len))),
        )
    }

    fn record(
        &mut self,
        name: &'static str,
        value: Tensor,
        inputs: &[&Var],
        op: impl FnOnce() -> Op,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut tracked = false;
        for v in inputs {
            if let Some(n) = v.node {
                if n.epoch != self.epoch {
                    return Err(Error::TapeConsumed);
                }
                tracked = true;
            }
        }
        let value = Arc::new(value);
        if !(self.recording && tracked) {
            return Ok(Var { value, node: None });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: op(),
            out: Arc::clone(&value),
            param: None,
        });
        Ok(Var {
            value,
            node: Some(NodeRef {
                epoch: self.epoch,
                id,
            }),
        })
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn matmul_ex(&mut self, a: &Var, ta: bool, b: &Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {sa:?} x {sb:?}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, a.value.data(), ta, b.value.data(), tb, &mut out, 0.0);
        let value = Tensor::new(&[m, n], out)?;
        self.record("matmul", value, &[a, b], || Op::MatMul {
            a: a.clone(),
            b: b.clone(),
            ta,
            tb,
        })
    }

    fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(a: &Var, b: &Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let data = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("add", a, b)?;
        let v = Self::zip_with(a, b, |x, y| x + y)?;
        self.record("add", v, &[a, b], || Op::Add(a.clone(), b.clone()))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("sub", a, b)?;
        let v = Self::zip_with(a, b, |x, y| x - y)?;
        self.record("sub", v, &[a, b], || Op::Sub(a.clone(), b.clone()))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("mul", a, b)?;
        let v = Self::zip_with(a, b, |x, y| x * y)?;
        self.record("mul", v, &[a, b], || Op::Mul(a.clone(), b.clone()))
    }

    /// Broadcast-add a vector along the last axis.
    pub fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let d = a.value.last_dim();
        if row.shape() != [d] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", a.shape(), row.shape()),
            ));
        }
        let r = row.value.data();
        let data = a
            .value
            .data()
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let v = Tensor::new(a.shape(), data)?;
        self.record("add_row", v, &[a, row], || Op::AddRow(a.clone(), row.clone()))
    }

    pub fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        let v = a.value.map(|x| x * c);
        self.record("scale", v, &[a], || Op::Scale(a.clone(), c))
    }

    /// Element-wise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, a: &Var, c: Arc<Tensor>) -> Result<Var> {
        if a.shape() != c.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", a.shape(), c.shape()),
            ));
        }
        let data = a
            .value
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(a.shape(), data)?;
        self.record("mul_const", v, &[a], || Op::MulConst(a.clone(), c))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: &Var) -> Result<Var> {
        let t: Vec<f64> = x.value.data().iter().map(|&v| gelu_tanh(v)).collect();
        let out = x
            .value
            .data()
            .iter()
            .zip(&t)
            .map(|(&v, &t)| 0.5 * v * (1.0 + t))
            .collect();
        let v = Tensor::new(x.shape(), out)?;
        self.record("gelu", v, &[x], || Op::Gelu { x: x.clone(), tanh: t })
    }

    /// Layer normalisation over the last axis.
    pub fn layernorm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let d = x.value.last_dim();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "{:?} with gain {:?}, bias {:?}",
                    x.shape(),
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        if d == 0 {
            return Err(Error::Empty("layernorm"));
        }
        let rows = x.value.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (g, b) = (gain.value.data(), bias.value.data());
        for r in 0..rows {
            let row = x.value.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(x.shape(), out)?;
        self.record("layernorm", v, &[x, gain, bias], || Op::LayerNorm {
            x: x.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            xhat,
            inv_std,
        })
    }

    /// Softmax over the last axis. Where `allowed` is given, disallowed
    /// entries get exactly zero weight and are excluded from the sum.
    pub fn softmax(&mut self, x: &Var, allowed: Option<&[bool]>) -> Result<Var> {
        let d = x.value.last_dim();
        if d == 0 {
            return Err(Error::Empty("softmax"));
        }
        if let Some(m) = allowed {
            if m.len() != x.value.numel() {
                return Err(Error::shape("softmax", "mask size mismatch"));
            }
        }
        let rows = x.value.rows();
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = x.value.row(r);
            let ok = |j: usize| allowed.is_none_or(|m| m[r * d + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Empty("softmax (fully masked row)"));
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut total = 0.0;
            for j in 0..d {
                if ok(j) {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    total += e;
                }
            }
            let inv = 1.0 / total;
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let v = Tensor::new(x.shape(), out)?;
        self.record("softmax", v, &[x], || Op::Softmax(x.clone()))
    }

    pub fn log_softmax(&mut self, x: &Var) -> Result<Var> {
        let d = x.value.last_dim();
        if d == 0 {
            return Err(Error::Empty("log_softmax"));
        }
        let mut out = Vec::with_capacity(x.value.numel());
        for r in 0..x.value.rows() {
            let row = x.value.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let v = Tensor::new(x.shape(), out)?;
        self.record("log_softmax", v, &[x], || Op::LogSoftmax(x.clone()))
    }

    /// Rotary embedding on `[tokens, heads * head_dim]`; pairs (2k, 2k+1)
    /// of every head are rotated by `positions[t] * theta_k`.
    pub fn rope(
        &mut self,
        x: &Var,
        table: &Arc<RotaryTable>,
        positions: &Arc<Vec<usize>>,
    ) -> Result<Var> {
        let hd = table.head_dim();
        let s = x.shape();
        if s.len() != 2 || !s[1].is_multiple_of(hd) || s[0] != positions.len() {
            return Err(Error::shape(
                "rope",
                format!("{s:?} with head dim {hd} and {} positions", positions.len()),
            ));
        }
        if let Some(&p) = positions.iter().max() {
            if p >= table.positions() {
                return Err(Error::shape(
                    "rope",
                    format!("position {p} beyond table of {}", table.positions()),
                ));
            }
        }
        let mut out = x.value.data().to_vec();
        let width = s[1];
        for (t, &p) in positions.iter().enumerate() {
            for head in out[t * width..(t + 1) * width].chunks_mut(hd) {
                table.rotate(head, p, false);
            }
        }
        let v = Tensor::new(s, out)?;
        self.record("rope", v, &[x], || Op::Rope {
            x: x.clone(),
            table: Arc::clone(table),
            positions: Arc::clone(positions),
        })
    }

    /// Add `same[head]` where query and key channels match, `diff[head]`
    /// otherwise.
    #[allow(clippy::too_many_arguments)]
    pub fn add_channel_bias(
        &mut self,
        scores: &Var,
        same: &Var,
        diff: &Var,
        head: usize,
        q_channels: &Arc<Vec<usize>>,
        k_channels: &Arc<Vec<usize>>,
    ) -> Result<Var> {
        let s = scores.shape();
        if s != [q_channels.len(), k_channels.len()]
            || same.value.rank() != 1
            || same.shape() != diff.shape()
            || head >= same.value.numel()
        {
            return Err(Error::shape("add_channel_bias", format!("{s:?}")));
        }
        let (us, ud) = (same.value.data()[head], diff.value.data()[head]);
        let nk = k_channels.len();
        let mut out = scores.value.data().to_vec();
        for (i, &qc) in q_channels.iter().enumerate() {
            for (j, &kc) in k_channels.iter().enumerate() {
                out[i * nk + j] += if qc == kc { us } else { ud };
            }
        }
        let v = Tensor::new(s, out)?;
        self.record("add_channel_bias", v, &[scores, same, diff], || {
            Op::ChannelBias {
                scores: scores.clone(),
                same: same.clone(),
                diff: diff.clone(),
                head,
                q_channels: Arc::clone(q_channels),
                k_channels: Arc::clone(k_channels),
            }
        })
    }

    pub fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("{s:?}[.., {start}..{}]", start + len),
            ));
        }
        let mut out = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            out.extend_from_slice(&x.value.row(r)[start..start + len]);
        }
        let v = Tensor::new(&[s[0], len], out)?;
        self.record("slice_cols", v, &[x], || Op::SliceCols {
            x: x.clone(),
            start,
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = first.shape()[0];
        if parts
            .iter()
            .any(|p| p.value.rank() != 2 || p.shape()[0] != rows)
        {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let width: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.value.row(r));
            }
        }
        let v = Tensor::new(&[rows, width], out)?;
        let refs: Vec<&Var> = parts.iter().collect();
        self.record("concat_cols", v, &refs, || Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: &Var, idx: &Arc<Vec<usize>>) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", format!("{s:?}")));
        }
        let mut out = Vec::with_capacity(idx.len() * s[1]);
        for &i in idx.iter() {
            out.extend_from_slice(x.value.row(i));
        }
        let v = Tensor::new(&[idx.len(), s[1]], out)?;
        self.record("gather_rows", v, &[x], || Op::GatherRows {
            x: x.clone(),
            idx: Arc::clone(idx),
        })
    }

    /// Place row `i` of `x` at row `idx[i]` of a zero `[rows, D]` tensor,
    /// summing on collisions.
    pub fn scatter_rows(&mut self, x: &Var, idx: &Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("scatter_rows", format!("{s:?} into {rows}")));
        }
        let d = s[1];
        let mut out = vec![0.0; rows * d];
        for (src, &dst) in idx.iter().enumerate() {
            for (o, v) in out[dst * d..(dst + 1) * d].iter_mut().zip(x.value.row(src)) {
                *o += v;
            }
        }
        let v = Tensor::new(&[rows, d], out)?;
        self.record("scatter_rows", v, &[x], || Op::ScatterRows {
            x: x.clone(),
            idx: Arc::clone(idx),
        })
    }

    /// Interleave encoded rows with a fill token: row `r` of the result is
    /// `token` where `mask[r]`, otherwise the next unused row of `enc`.
    pub fn fill_masked(&mut self, enc: &Var, token: &Var, mask: &Arc<Vec<bool>>) -> Result<Var> {
        let d = token.value.numel();
        let unmasked = mask.iter().filter(|&&m| !m).count();
        if token.value.rank() != 1 || enc.shape() != [unmasked, d] {
            return Err(Error::shape(
                "fill_masked",
                format!(
                    "enc {:?}, token {:?}, {unmasked} unmasked",
                    enc.shape(),
                    token.shape()
                ),
            ));
        }
        let mut out = Vec::with_capacity(mask.len() * d);
        let mut next = 0;
        for &m in mask.iter() {
            if m {
                out.extend_from_slice(token.value.data());
            } else {
                out.extend_from_slice(enc.value.row(next));
                next += 1;
            }
        }
        let v = Tensor::new(&[mask.len(), d], out)?;
        self.record("fill_masked", v, &[enc, token], || Op::FillMasked {
            enc: enc.clone(),
            token: token.clone(),
            mask: Arc::clone(mask),
        })
    }

    /// Channels-last 1-D convolution: `x` is `[batch, len, c_in]`,
    /// `kernel` is `[k, c_in, c_out]`; zero padding on both ends.
    pub fn conv1d(&mut self, x: &Var, kernel: &Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (x.shape(), kernel.shape());
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[1] || stride == 0 {
            return Err(Error::shape("conv1d", format!("x {xs:?}, kernel {ks:?}")));
        }
        let (batch, len, c_in) = (xs[0], xs[1], xs[2]);
        let (k, c_out) = (ks[0], ks[2]);
        if len + 2 * padding < k {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {k} longer than padded input {}", len + 2 * padding),
            ));
        }
        let l_out = (len + 2 * padding - k) / stride + 1;
        let width = k * c_in;
        let mut cols = vec![0.0; batch * l_out * width];
        let xd = x.value.data();
        for b in 0..batch {
            for o in 0..l_out {
                let row = &mut cols[(b * l_out + o) * width..(b * l_out + o + 1) * width];
                for kk in 0..k {
                    let pos = (o * stride + kk) as isize - padding as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let src = (b * len + pos as usize) * c_in;
                    row[kk * c_in..(kk + 1) * c_in].copy_from_slice(&xd[src..src + c_in]);
                }
            }
        }
        let mut out = vec![0.0; batch * l_out * c_out];
        gemm(
            batch * l_out,
            width,
            c_out,
            &cols,
            false,
            kernel.value.data(),
            false,
            &mut out,
            0.0,
        );
        let v = Tensor::new(&[batch, l_out, c_out], out)?;
        self.record("conv1d", v, &[x, kernel], || Op::Conv1d {
            x: x.clone(),
            kernel: kernel.clone(),
            cols,
            stride,
            padding,
            l_out,
        })
    }

    /// Depthwise 2-D convolution over the first two axes of `[h, w, d]`,
    /// kernel `[kh, kw, d]`, zero "same" padding (odd kernel extents).
    pub fn depthwise_conv2d(&mut self, x: &Var, kernel: &Var) -> Result<Var> {
        let (xs, ks) = (x.shape(), kernel.shape());
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[2] || ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("x {xs:?}, kernel {ks:?}"),
            ));
        }
        let (h, w, d) = (xs[0], xs[1], xs[2]);
        let (kh, kw) = (ks[0], ks[1]);
        let (ph, pw) = (kh / 2, kw / 2);
        let (xd, kd) = (x.value.data(), kernel.value.data());
        let mut out = vec![0.0; h * w * d];
        for i in 0..h {
            for j in 0..w {
                let o = &mut out[(i * w + j) * d..(i * w + j + 1) * d];
                for a in 0..kh {
                    let si = i as isize + a as isize - ph as isize;
                    if si < 0 || si as usize >= h {
                        continue;
                    }
                    for b in 0..kw {
                        let sj = j as isize + b as isize - pw as isize;
                        if sj < 0 || sj as usize >= w {
                            continue;
                        }
                        let src = (si as usize * w + sj as usize) * d;
                        let kr = (a * kw + b) * d;
                        for c in 0..d {
                            o[c] += kd[kr + c] * xd[src + c];
                        }
                    }
                }
            }
        }
        let v = Tensor::new(xs, out)?;
        self.record("depthwise_conv2d", v, &[x, kernel], || Op::DepthwiseConv2d {
            x: x.clone(),
            kernel: kernel.clone(),
        })
    }

    /// `|DFT_L|` of every last-axis slice, full length L.
    pub fn dft_magnitude(&mut self, x: &Var) -> Result<Var> {
        let l = x.value.last_dim();
        if l == 0 || x.value.rank() == 0 {
            return Err(Error::Empty("dft_magnitude"));
        }
        let plan = self.dft_plan(l);
        let rows = x.value.rows();
        let mut spectrum = Vec::with_capacity(rows * l);
        let mut out = Vec::with_capacity(rows * l);
        for r in 0..rows {
            let s = plan.forward_real(x.value.row(r));
            out.extend(s.iter().map(|c| c.norm()));
            spectrum.extend(s);
        }
        let v = Tensor::new(x.shape(), out)?;
        self.record("dft_magnitude", v, &[x], || Op::DftMagnitude {
            x: x.clone(),
            spectrum,
            plan,
        })
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let v = x.value.as_ref().clone().reshape(shape)?;
        self.record("reshape", v, &[x], || Op::Reshape(x.clone()))
    }

    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        let v = Tensor::scalar(x.value.sum());
        self.record("sum", v, &[x], || Op::Sum(x.clone()))
    }

    /// Mean over rows of a `[rows, d]` tensor.
    pub fn mean_rows(&mut self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("mean_rows", format!("{s:?}")));
        }
        let mut out = vec![0.0; s[1]];
        for r in 0..s[0] {
            for (o, v) in out.iter_mut().zip(x.value.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / s[0] as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let v = Tensor::from_vec(out);
        self.record("mean_rows", v, &[x], || Op::MeanRows(x.clone()))
    }

    /// `x * w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(&y, b),
            None => Ok(y),
        }
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the recorded nodes; vars
    /// created before this call become stale.
    pub fn backward(&mut self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let epoch = self.epoch;
        let nodes = std::mem::take(&mut self.nodes);
        self.epoch = NEXT_EPOCH.fetch_add(1, Ordering::Relaxed);

        let mut out = Gradients {
            epoch,
            ..Default::default()
        };
        let Some(root) = loss.node else {
            return Ok(out);
        };
        if root.epoch != epoch {
            return Err(Error::TapeConsumed);
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.id + 1);
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(Tensor::ones(loss.shape()));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                if let Some(p) = node.param { match out.params.get_mut(&p) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(p, g.clone());
                    }
                } }
                out.leaves.insert(id, g);
                continue;
            }
            backward_node(node, &g, &mut grads)?;
        }
        Ok(out)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + 0.044715 * x * x * x)).tanh()
}

fn accumulate(grads: &mut [Option<Tensor>], v: &Var, g: Tensor) {
    let Some(n) = v.node else { return };
    match &mut grads[n.id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backward_node(node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let gd = g.data();
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::MatMul { a, b, ta, tb } => {
            let (m, n) = (g.shape()[0], g.shape()[1]);
            let k = if *ta { a.shape()[0] } else { a.shape()[1] };
            if a.requires_grad() {
                let mut ga = vec![0.0; m * k];
                if *ta {
                    gemm(k, n, m, b.value.data(), *tb, gd, true, &mut ga, 0.0);
                } else {
                    gemm(m, n, k, gd, false, b.value.data(), !*tb, &mut ga, 0.0);
                }
                accumulate(grads, a, Tensor::new(a.shape(), ga)?);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; k * n];
                if *tb {
                    gemm(n, m, k, gd, true, a.value.data(), *ta, &mut gb, 0.0);
                } else {
                    gemm(k, m, n, a.value.data(), !*ta, gd, false, &mut gb, 0.0);
                }
                accumulate(grads, b, Tensor::new(b.shape(), gb)?);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, a, g.clone());
            accumulate(grads, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, g.clone());
            accumulate(grads, b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let d = gd.iter().zip(b.value.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, a, Tensor::new(a.shape(), d)?);
            }
            if b.requires_grad() {
                let d = gd.iter().zip(a.value.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, b, Tensor::new(b.shape(), d)?);
            }
        }
        Op::AddRow(a, row) => {
            accumulate(grads, a, g.clone());
            if row.requires_grad() {
                let d = row.value.numel();
                let mut gr = vec![0.0; d];
                for chunk in gd.chunks(d) {
                    for (o, v) in gr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(grads, row, Tensor::from_vec(gr));
            }
        }
        Op::Scale(a, c) => accumulate(grads, a, g.map(|v| v * c)),
        Op::MulConst(a, c) => {
            let d = gd.iter().zip(c.data()).map(|(x, y)| x * y).collect();
            accumulate(grads, a, Tensor::new(a.shape(), d)?);
        }
        Op::Gelu { x, tanh } => {
            let d = gd
                .iter()
                .zip(x.value.data())
                .zip(tanh)
                .map(|((gv, &xv), &t)| {
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                    gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du)
                })
                .collect();
            accumulate(grads, x, Tensor::new(x.shape(), d)?);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = gain.value.numel();
            let gw = gain.value.data();
            let rows = inv_std.len();
            if x.requires_grad() {
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gw[j];
                        mean_gh += gh;
                        mean_ghh += gh * hr[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghh /= d as f64;
                    for j in 0..d {
                        let gh = gr[j] * gw[j];
                        gx[r * d + j] = inv_std[r] * (gh - mean_gh - hr[j] * mean_ghh);
                    }
                }
                accumulate(grads, x, Tensor::new(x.shape(), gx)?);
            }
            if gain.requires_grad() || bias.requires_grad() {
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += gd[r * d + j] * xhat[r * d + j];
                        gb[j] += gd[r * d + j];
                    }
                }
                accumulate(grads, gain, Tensor::from_vec(gg));
                accumulate(grads, bias, Tensor::from_vec(gb));
            }
        }
        Op::Softmax(x) => {
            let y = node.out.data();
            let d = node.out.last_dim();
            let mut gx = vec![0.0; y.len()];
            for r in 0..node.out.rows() {
                let (yr, gr) = (&y[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gx[r * d + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, x, Tensor::new(x.shape(), gx)?);
        }
        Op::LogSoftmax(x) => {
            let y = node.out.data();
            let d = node.out.last_dim();
            let mut gx = vec![0.0; y.len()];
            for r in 0..node.out.rows() {
                let gsum: f64 = gd[r * d..(r + 1) * d].iter().sum();
                for j in 0..d {
                    gx[r * d + j] = gd[r * d + j] - y[r * d + j].exp() * gsum;
                }
            }
            accumulate(grads, x, Tensor::new(x.shape(), gx)?);
        }
        Op::Rope {
            x,
            table,
            positions,
        } => {
            let hd = table.head_dim();
            let width = x.shape()[1];
            let mut gx = gd.to_vec();
            for (t, &p) in positions.iter().enumerate() {
                for head in gx[t * width..(t + 1) * width].chunks_mut(hd) {
                    table.rotate(head, p, true);
                }
            }
            accumulate(grads, x, Tensor::new(x.shape(), gx)?);
        }
        Op::ChannelBias {
            scores,
            same,
            diff,
            head,
            q_channels,
            k_channels,
        } => {
            accumulate(grads, scores, g.clone());
            let nk = k_channels.len();
            let (mut gs, mut gdf) = (0.0, 0.0);
            for (i, &qc) in q_channels.iter().enumerate() {
                for (j, &kc) in k_channels.iter().enumerate() {
                    if qc == kc {
                        gs += gd[i * nk + j];
                    } else {
                        gdf += gd[i * nk + j];
                    }
                }
            }
            let h = same.value.numel();
            let mut vs = vec![0.0; h];
            let mut vd = vec![0.0; h];
            vs[*head] = gs;
            vd[*head] = gdf;
            accumulate(grads, same, Tensor::from_vec(vs));
            accumulate(grads, diff, Tensor::from_vec(vd));
        }
        Op::SliceCols { x, start } => {
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let len = g.shape()[1];
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                gx[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&gd[r * len..(r + 1) * len]);
            }
            accumulate(grads, x, Tensor::new(x.shape(), gx)?);
        }
        Op::ConcatCols(parts) => {
            let (rows, width) = (g.shape()[0], g.shape()[1]);
            let mut offset = 0;
            for p in parts {
                let w = p.shape()[1];
                if p.requires_grad() {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&gd[r * width + offset..r * width + offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(p.shape(), gp)?);
                }
                offset += w;
            }
        }
        Op::GatherRows { x, idx } => {
            let d = x.shape()[1];
            let mut gx = vec![0.0; x.value.numel()];
            for (src, &dst) in idx.iter().enumerate() {
                for (o, v) in gx[dst * d..(dst + 1) * d]
                    .iter_mut()
                    .zip(&gd[src * d..(src + 1) * d])
                {
                    *o += v;
                }
            }
            accumulate(grads, x, Tensor::new(x.shape(), gx)?);
        }
        Op::ScatterRows { x, idx } => {
            let d = x.shape()[1];
            let mut gx = Vec::with_capacity(x.value.numel());
            for &i in idx.iter() {
                gx.extend_from_slice(&gd[i * d..(i + 1) * d]);
            }
            accumulate(grads, x, Tensor::new(x.shape(), gx)?);
        }
        Op::FillMasked { enc, token, mask } => {
            let d = token.value.numel();
            let mut ge = Vec::with_capacity(enc.value.numel());
            let mut gt = vec![0.0; d];
            for (r, &m) in mask.iter().enumerate() {
                let row = &gd[r * d..(r + 1) * d];
                if m {
                    for (o, v) in gt.iter_mut().zip(row) {
                        *o += v;
                    }
                } else {
                    ge.extend_from_slice(row);
                }
            }
            accumulate(grads, enc, Tensor::new(enc.shape(), ge)?);
            accumulate(grads, token, Tensor::from_vec(gt));
        }
        Op::Conv1d {
            x,
            kernel,
            cols,
            stride,
            padding,
            l_out,
        } => {
            let (batch, len, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (k, c_out) = (kernel.shape()[0], kernel.shape()[2]);
            let width = k * c_in;
            let rows = batch * l_out;
            if kernel.requires_grad() {
                let mut gk = vec![0.0; width * c_out];
                gemm(width, rows, c_out, cols, true, gd, false, &mut gk, 0.0);
                accumulate(grads, kernel, Tensor::new(kernel.shape(), gk)?);
            }
            if x.requires_grad() {
                let mut gcols = vec![0.0; rows * width];
                gemm(
                    rows,
                    c_out,
                    width,
                    gd,
                    false,
                    kernel.value.data(),
                    true,
                    &mut gcols,
                    0.0,
                );
                let mut gx = vec![0.0; x.value.numel()];
                for b in 0..batch {
                    for o in 0..*l_out {
                        let row = &gcols[(b * l_out + o) * width..(b * l_out + o + 1) * width];
                        for kk in 0..k {
                            let pos = (o * stride + kk) as isize - *padding as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            let dst = (b * len + pos as usize) * c_in;
                            for c in 0..c_in {
                                gx[dst + c] += row[kk * c_in + c];
                            }
                        }
                    }
                }
                accumulate(grads, x, Tensor::new(x.shape(), gx)?);
            }
        }
        Op::DepthwiseConv2d { x, kernel } => {
            let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
            let (ph, pw) = (kh / 2, kw / 2);
            let (xd, kd) = (x.value.data(), kernel.value.data());
            let mut gx = vec![0.0; xd.len()];
            let mut gk = vec![0.0; kd.len()];
            for i in 0..h {
                for j in 0..w {
                    let go = &gd[(i * w + j) * d..(i * w + j + 1) * d];
                    for a in 0..kh {
                        let si = i as isize + a as isize - ph as isize;
                        if si < 0 || si as usize >= h {
                            continue;
                        }
                        for b in 0..kw {
                            let sj = j as isize + b as isize - pw as isize;
                            if sj < 0 || sj as usize >= w {
                                continue;
                            }
                            let src = (si as usize * w + sj as usize) * d;
                            let kr = (a * kw + b) * d;
                            for c in 0..d {
                                gx[src + c] += kd[kr + c] * go[c];
                                gk[kr + c] += xd[src + c] * go[c];
                            }
                        }
                    }
                }
            }
            accumulate(grads, x, Tensor::new(x.shape(), gx)?);
            accumulate(grads, kernel, Tensor::new(kernel.shape(), gk)?);
        }
        Op::DftMagnitude { x, spectrum, plan } => {
            let l = plan.len();
            let mut gx = Vec::with_capacity(x.value.numel());
            for r in 0..x.value.rows() {
                let spec = &spectrum[r * l..(r + 1) * l];
                let gr = &gd[r * l..(r + 1) * l];
                // d|X_k|/dx_t = Re(conj(X_k)/|X_k| e^{-i w k t}); the sum over k
                // is the real part of a forward DFT of conj(c_k).
                let c: Vec<Complex> = spec
                    .iter()
                    .zip(gr)
                    .map(|(z, &gv)| {
                        let mag = z.norm();
                        if mag == 0.0 {
                            Complex::default()
                        } else {
                            Complex::new(gv * z.re / mag, -gv * z.im / mag)
                        }
                    })
                    .collect();
                gx.extend(plan.forward(&c).into_iter().map(|z| z.re));
            }
            accumulate(grads, x, Tensor::new(x.shape(), gx)?);
        }
        Op::Reshape(x) => {
            accumulate(grads, x, g.clone().reshape(x.shape())?);
        }
        Op::Sum(x) => {
            accumulate(grads, x, Tensor::full(x.shape(), g.item()));
        }
        Op::MeanRows(x) => {
            let (rows, d) = (x.shape()[0], x.shape()[1]);
            let inv = 1.0 / rows as f64;
            let mut gx = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                gx.extend(gd.iter().map(|v| v * inv));
            }
            accumulate(grads, x, Tensor::new(x.shape(), gx)?);
        }
    }
    Ok(())
}
