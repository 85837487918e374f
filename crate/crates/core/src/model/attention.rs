//! Multi-head attention over a flattened (channel x time) token set.
//!
//! Scores for head h between query token (time i, channel m) and key
//! token (time j, channel n):
//!
//! ```text
//! E = rot(q, i) . rot(k, j) / sqrt(d_h) + (m == n ? u_same[h] : u_diff[h])
//! ```
//!
//! Rotating both sides by their own position makes the bilinear term a
//! function of `i - j` only. Values are not rotated. The channel term is
//! the only place channel identity enters, and it only asks whether two
//! tokens share a channel, so relabelling channels cannot change it.

use std::sync::Arc;

use super::config::BlockKind;
use super::layers::{Fwd, Init, Linear, Norm};
use crate::autodiff::{RotaryTable, Var};
use crate::error::{Error, Result};
use crate::params::ParamId;

/// Time and channel index of every token row.
#[derive(Clone, Debug)]
pub struct Tokens {
    pub time: Arc<Vec<usize>>,
    pub channel: Arc<Vec<usize>>,
}

impl Tokens {
    /// Row `c * n + t` holds channel `c` at time `t`.
    pub fn grid(c: usize, n: usize) -> Self {
        let time = (0..c).flat_map(|_| 0..n).collect();
        let channel = (0..c).flat_map(|ch| std::iter::repeat_n(ch, n)).collect();
        Self {
            time: Arc::new(time),
            channel: Arc::new(channel),
        }
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub u_same: ParamId,
    pub u_diff: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    pub rope: bool,
    pub channel_bias: bool,
    /// First half of the heads attend within a time step, the rest
    /// within a channel.
    pub split_axes: bool,
}

/// Per-head intermediate values, for inspection.
pub struct AttentionTrace {
    pub output: Var,
    /// Scaled, biased scores before softmax, one `[T, T]` per head.
    pub scores: Vec<Var>,
    /// Softmax weights, one `[T, T]` per head.
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
        kind: BlockKind,
        rope: bool,
        channel_bias: bool,
    ) -> Self {
        let (rope, channel_bias) = match kind {
            BlockKind::Vanilla => (false, false),
            _ => (rope, channel_bias),
        };
        Self {
            wq: init.linear(&format!("{name}.wq"), d, d, false),
            wk: init.linear(&format!("{name}.wk"), d, d, false),
            wv: init.linear(&format!("{name}.wv"), d, d, false),
            wo: init.linear(&format!("{name}.wo"), d, d, false),
            u_same: init.small(&format!("{name}.u_same"), &[heads], 0.0, 1.0),
            u_diff: init.small(&format!("{name}.u_diff"), &[heads], 0.0, 1.0),
            heads,
            head_dim: d / heads,
            rope,
            channel_bias,
            split_axes: kind == BlockKind::CrissCross,
        }
    }

    /// Heads `0..spatial_heads()` see only same-time keys when the axes
    /// are split.
    pub fn spatial_heads(&self) -> usize {
        if self.split_axes {
            self.heads / 2
        } else {
            0
        }
    }

    fn axis_masks(&self, tok: &Tokens) -> Option<(Vec<bool>, Vec<bool>)> {
        if !self.split_axes {
            return None;
        }
        let t = tok.len();
        let mut same_time = Vec::with_capacity(t * t);
        let mut same_chan = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                same_time.push(tok.time[i] == tok.time[j]);
                same_chan.push(tok.channel[i] == tok.channel[j]);
            }
        }
        Some((same_time, same_chan))
    }

    pub fn forward(
        &self,
        f: &mut Fwd,
        x: &Var,
        tok: &Tokens,
        rotary: &Arc<RotaryTable>,
        dropout: f64,
    ) -> Result<Var> {
        Ok(self.run(f, x, tok, rotary, dropout, false)?.output)
    }

    pub fn trace(
        &self,
        f: &mut Fwd,
        x: &Var,
        tok: &Tokens,
        rotary: &Arc<RotaryTable>,
    ) -> Result<AttentionTrace> {
        self.run(f, x, tok, rotary, 0.0, true)
    }

    fn run(
        &self,
        f: &mut Fwd,
        x: &Var,
        tok: &Tokens,
        rotary: &Arc<RotaryTable>,
        dropout: f64,
        keep: bool,
    ) -> Result<AttentionTrace> {
        if x.shape().len() != 2 || x.shape()[0] != tok.len() {
            return Err(Error::shape(
                "attention",
                format!("{:?} for {} tokens", x.shape(), tok.len()),
            ));
        }
        let mut q = self.wq.forward(f, x)?;
        let mut k = self.wk.forward(f, x)?;
        let v = self.wv.forward(f, x)?;
        if self.rope {
            q = f.tape.rope(&q, rotary, &tok.time)?;
            k = f.tape.rope(&k, rotary, &tok.time)?;
        }
        q = f.tape.scale(&q, 1.0 / (self.head_dim as f64).sqrt())?;
        let (u_same, u_diff) = if self.channel_bias {
            (Some(f.p(self.u_same)), Some(f.p(self.u_diff)))
        } else {
            (None, None)
        };
        let masks = self.axis_masks(tok);

        let mut outs = Vec::with_capacity(self.heads);
        let mut scores_kept = Vec::new();
        let mut weights_kept = Vec::new();
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = f.tape.slice_cols(&q, start, self.head_dim)?;
            let kh = f.tape.slice_cols(&k, start, self.head_dim)?;
            let vh = f.tape.slice_cols(&v, start, self.head_dim)?;
            let mut s = f.tape.matmul_nt(&qh, &kh)?;
            if let (Some(us), Some(ud)) = (&u_same, &u_diff) {
                s = f
                    .tape
                    .add_channel_bias(&s, us, ud, h, &tok.channel, &tok.channel)?;
            }
            let allowed = masks.as_ref().map(|(st, sc)| {
                if h < self.spatial_heads() {
                    st.as_slice()
                } else {
                    sc.as_slice()
                }
            });
            let a = f.tape.softmax(&s, allowed)?;
            let a_drop = f.dropout(&a, dropout)?;
            outs.push(f.tape.matmul(&a_drop, &vh)?);
            if keep {
                scores_kept.push(s);
                weights_kept.push(a);
            }
        }
        let cat = f.tape.concat_cols(&outs)?;
        let output = self.wo.forward(f, &cat)?;
        Ok(AttentionTrace {
            output,
            scores: scores_kept,
            weights: weights_kept,
        })
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub kind: BlockKind,
    pub rope: bool,
    pub channel_bias: bool,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, s: BlockSpec) -> Self {
        Self {
            ln1: init.norm(&format!("{name}.ln1"), s.d),
            attn: Attention::new(
                init,
                &format!("{name}.attn"),
                s.d,
                s.heads,
                s.kind,
                s.rope,
                s.channel_bias,
            ),
            ln2: init.norm(&format!("{name}.ln2"), s.d),
            ff1: init.linear(&format!("{name}.ff1"), s.d, s.ffn, true),
            ff2: init.linear(&format!("{name}.ff2"), s.ffn, s.d, true),
            dropout: s.dropout,
        }
    }

    pub fn forward(
        &self,
        f: &mut Fwd,
        x: &Var,
        tok: &Tokens,
        rotary: &Arc<RotaryTable>,
    ) -> Result<Var> {
        let h = self.ln1.forward(f, x)?;
        let a = self.attn.forward(f, &h, tok, rotary, self.dropout)?;
        let a = f.dropout(&a, self.dropout)?;
        let x = f.tape.add(x, &a)?;
        let h = self.ln2.forward(f, &x)?;
        let h = self.ff1.forward(f, &h)?;
        let h = f.tape.gelu(&h)?;
        let h = f.dropout(&h, self.dropout)?;
        let h = self.ff2.forward(f, &h)?;
        let h = f.dropout(&h, self.dropout)?;
        f.tape.add(&x, &h)
    }
}

#[cfg(test)]
mod tests;
