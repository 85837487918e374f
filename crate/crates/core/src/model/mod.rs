//! The encoder: per-patch embedding, positional encoding, a stack of
//! attention blocks, and task heads.
//!
//! Token row `c * N + n` holds channel `c` at time step `n`.

mod acpe;
mod attention;
mod config;
mod layers;
mod patch;
mod stcpe;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use acpe::Acpe;
pub use attention::{Attention, AttentionTrace, Block, BlockSpec, Tokens};
pub use config::{BlockKind, InitMode, ModelConfig, PositionalKind};
pub use layers::{Fwd, Init, Linear, Norm};
pub use patch::{conv_out_len, PatchEncoder, INPUT_SCALE};
pub use stcpe::{windows, Stcpe};

use crate::autodiff::{RotaryTable, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::signal::PATCH_LEN;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Positional {
    Stcpe(Stcpe),
    Acpe(Acpe),
    None,
}

/// Learned absolute time and channel embeddings (vanilla blocks only).
#[derive(Clone, Debug)]
pub struct AbsoluteEmbedding {
    pub time: ParamId,
    pub channel: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: ModelConfig,
    pub patch: PatchEncoder,
    pub positional: Positional,
    pub absolute: Option<AbsoluteEmbedding>,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    rotary: Arc<RotaryTable>,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let patch = PatchEncoder::new(init, cfg);
        let positional = match cfg.positional {
            PositionalKind::Stcpe => Positional::Stcpe(Stcpe::new(init, cfg)),
            PositionalKind::Acpe => Positional::Acpe(Acpe::new(init, cfg)),
            PositionalKind::None => Positional::None,
        };
        let absolute = (cfg.block == BlockKind::Vanilla).then(|| AbsoluteEmbedding {
            time: init.small("abs.time", &[cfg.max_patches, d], 0.02, 1.0),
            channel: init.small("abs.channel", &[cfg.max_channels, d], 0.02, 1.0),
        });
        let spec = BlockSpec {
            d,
            heads: cfg.heads,
            ffn: cfg.ffn_dim,
            dropout: cfg.dropout,
            kind: cfg.block,
            rope: cfg.rope,
            channel_bias: cfg.binary_bias,
        };
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(init, &format!("blocks.{i}"), spec))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            positional,
            absolute,
            blocks,
            final_norm: init.norm("final_norm", d),
            rotary: Arc::new(RotaryTable::new(cfg.head_dim(), cfg.max_patches, cfg.rope_base)),
        })
    }

    pub fn rotary(&self) -> &Arc<RotaryTable> {
        &self.rotary
    }

    fn check_grid(&self, grid: &Tensor) -> Result<(usize, usize)> {
        let s = grid.shape();
        if s.len() != 3 || s[2] != PATCH_LEN || s[0] == 0 || s[1] == 0 {
            return Err(Error::shape(
                "encoder",
                format!("expected non-empty [C, N, {PATCH_LEN}], got {s:?}"),
            ));
        }
        if s[1] > self.cfg.max_patches {
            return Err(Error::invalid(format!(
                "{} patches exceed max_patches {}",
                s[1], self.cfg.max_patches
            )));
        }
        if self.absolute.is_some() && s[0] > self.cfg.max_channels {
            return Err(Error::invalid(format!(
                "{} channels exceed max_channels {}",
                s[0], self.cfg.max_channels
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Patch embeddings with positional information added: `[C*N, D]`.
    pub fn embed(&self, f: &mut Fwd, grid: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        let (c, n) = self.check_grid(grid)?;
        let mut x = self.patch.encode_grid(f, grid, mask)?;
        let pe = match &self.positional {
            Positional::Stcpe(s) => Some(s.forward(f, &x, c, n)?),
            Positional::Acpe(a) => Some(a.forward(f, &x, c, n)?),
            Positional::None => None,
        };
        if let Some(pe) = pe {
            x = f.tape.add(&x, &pe)?;
        }
        if let Some(abs) = &self.absolute {
            let tok = Tokens::grid(c, n);
            let t = f.p(abs.time);
            let t = f.tape.gather_rows(&t, &tok.time)?;
            let ch = f.p(abs.channel);
            let ch = f.tape.gather_rows(&ch, &tok.channel)?;
            x = f.tape.add(&x, &t)?;
            x = f.tape.add(&x, &ch)?;
        }
        Ok(x)
    }

    /// Run the block stack over embedded tokens (no final norm).
    pub fn stack(&self, f: &mut Fwd, x: &Var, c: usize, n: usize) -> Result<Var> {
        let tok = Tokens::grid(c, n);
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(f, &x, &tok, &self.rotary)?;
        }
        Ok(x)
    }

    /// Full encoder: `[C, N, 200]` grid to `[C*N, D]` token features.
    pub fn forward(&self, f: &mut Fwd, grid: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        let (c, n) = self.check_grid(grid)?;
        let x = self.embed(f, grid, mask)?;
        let x = self.stack(f, &x, c, n)?;
        self.final_norm.forward(f, &x)
    }
}

/// Linear map from each token to the 200 samples of its patch.
#[derive(Clone, Debug)]
pub struct ReconstructionHead {
    pub proj: Linear,
}

impl ReconstructionHead {
    pub fn new(init: &mut Init, d: usize) -> Self {
        Self {
            proj: init.linear("head.recon", d, PATCH_LEN, true),
        }
    }

    pub fn forward(&self, f: &mut Fwd, tokens: &Var) -> Result<Var> {
        self.proj.forward(f, tokens)
    }
}

/// Mean over all tokens, then a linear map to class logits.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub proj: Linear,
    pub classes: usize,
}

impl ClassificationHead {
    pub fn new(init: &mut Init, d: usize, classes: usize) -> Self {
        Self {
            proj: init.linear("head.cls", d, classes, true),
            classes,
        }
    }

    /// Logits as a `[1, K]` row.
    pub fn forward(&self, f: &mut Fwd, tokens: &Var) -> Result<Var> {
        let pooled = f.tape.mean_rows(tokens)?;
        let d = pooled.shape()[0];
        let pooled = f.tape.reshape(&pooled, &[1, d])?;
        self.proj.forward(f, &pooled)
    }
}

/// Encoder plus the heads a run needs, with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub recon: Option<ReconstructionHead>,
    pub classifier: Option<ClassificationHead>,
    pub store: ParamStore,
}

impl Model {
    /// Build with a fresh parameter store. `classes` adds a classification
    /// head; `recon` adds a reconstruction head.
    pub fn new(cfg: &ModelConfig, seed: u64, recon: bool, classes: Option<usize>) -> Result<Self> {
        let mut store = ParamStore::new();
        let (encoder, recon, classifier) = {
            let mut init = Init {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(seed),
                mode: cfg.init,
            };
            let enc = Encoder::new(cfg, &mut init)?;
            let r = recon.then(|| ReconstructionHead::new(&mut init, cfg.d_model));
            let c = match classes {
                Some(k) if k < 2 => {
                    return Err(Error::invalid(format!("need at least 2 classes, got {k}")))
                }
                Some(k) => Some(ClassificationHead::new(&mut init, cfg.d_model, k)),
                None => None,
            };
            (enc, r, c)
        };
        Ok(Self {
            encoder,
            recon,
            classifier,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.cfg
    }

    /// Copy every parameter of `other` whose name and shape match; returns
    /// how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (_, name, value) in other.iter() {
            if let Some(id) = self.store.id(name) {
                if self.store.set(id, value.clone()).is_ok() {
                    n += 1;
                }
            }
        }
        n
    }
}
