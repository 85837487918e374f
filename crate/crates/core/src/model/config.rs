use std::fmt;
use std::str::FromStr;

use crate::config::{join_list, parse_bool, parse_list, parse_value, KeyValue};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Full spatio-temporal attention with rotary time and channel bias.
    Diver,
    /// Plain attention plus learned absolute time and channel embeddings.
    Vanilla,
    /// Heads split between same-time (spatial) and same-channel (temporal)
    /// attention.
    CrissCross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalKind {
    /// Sliding-window transformer positional encoding.
    Stcpe,
    /// Depthwise convolution over (channel, time).
    Acpe,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Small normal weights, zero biases and bias scalars, zero PE output.
    Standard,
    /// Every parameter drawn at unit-ish scale so no path is trivially
    /// zero; used by equivariance and gradient checks.
    Dense,
}

macro_rules! named_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!("unknown {} `{s}`", stringify!($t)))),
                }
            }
        }
    };
}

named_enum!(BlockKind, BlockKind::Diver => "diver", BlockKind::Vanilla => "vanilla", BlockKind::CrissCross => "crisscross");
named_enum!(PositionalKind, PositionalKind::Stcpe => "stcpe", PositionalKind::Acpe => "acpe", PositionalKind::None => "none");
named_enum!(InitMode, InitMode::Standard => "standard", InitMode::Dense => "dense");

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub rope_base: f64,
    /// Output channels of each conv stage.
    pub cnn_channels: Vec<usize>,
    pub cnn_kernel: usize,
    pub d_pe: usize,
    pub pe_heads: usize,
    pub pe_window: usize,
    /// Longest sequence of patches the rotary table and absolute
    /// embeddings cover.
    pub max_patches: usize,
    /// Channel slots for the vanilla block's absolute channel embedding.
    pub max_channels: usize,
    pub cnn_encoding: bool,
    pub spectral: bool,
    pub rope: bool,
    pub binary_bias: bool,
    pub block: BlockKind,
    pub positional: PositionalKind,
    /// Fixed channel count required by the convolutional positional
    /// encoding.
    pub acpe_channels: usize,
    pub acpe_kernel: (usize, usize),
    pub init: InitMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 200,
            heads: 10,
            depth: 12,
            ffn_dim: 800,
            dropout: 0.1,
            rope_base: 10_000.0,
            cnn_channels: vec![25, 50, 8],
            cnn_kernel: 7,
            d_pe: 40,
            pe_heads: 2,
            pe_window: 7,
            max_patches: 64,
            max_channels: 64,
            cnn_encoding: true,
            spectral: true,
            rope: true,
            binary_bias: true,
            block: BlockKind::Diver,
            positional: PositionalKind::Stcpe,
            acpe_channels: 19,
            acpe_kernel: (3, 7),
            init: InitMode::Standard,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dimension {} must be even", self.head_dim()));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base must be > 1".into());
        }
        if self.cnn_encoding {
            if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
                return bad("cnn_channels must be non-empty and positive".into());
            }
            if self.cnn_kernel.is_multiple_of(2) {
                return bad("cnn_kernel must be odd".into());
            }
        }
        if self.positional == PositionalKind::Stcpe {
            if self.d_pe == 0 || self.d_pe >= self.d_model {
                return bad(format!("d_pe {} must lie in (0, d_model)", self.d_pe));
            }
            if self.pe_heads == 0 || !self.d_pe.is_multiple_of(self.pe_heads) {
                return bad("d_pe must be a multiple of pe_heads".into());
            }
            if !(self.d_pe / self.pe_heads).is_multiple_of(2) {
                return bad("positional head dimension must be even".into());
            }
            if self.pe_window == 0 {
                return bad("pe_window must be >= 1".into());
            }
        }
        if self.positional == PositionalKind::Acpe {
            let (kh, kw) = self.acpe_kernel;
            if kh % 2 == 0 || kw % 2 == 0 {
                return bad("acpe_kernel extents must be odd".into());
            }
            if self.acpe_channels == 0 {
                return bad("acpe_channels must be > 0".into());
            }
        }
        if self.block == BlockKind::CrissCross && self.heads < 2 {
            return bad("crisscross blocks need at least 2 heads".into());
        }
        if self.max_patches == 0 {
            return bad("max_patches must be > 0".into());
        }
        Ok(())
    }

    /// Whether the architecture, as configured, commutes with channel
    /// permutations.
    pub fn expect_channel_equivariant(&self) -> bool {
        self.block != BlockKind::Vanilla && self.positional != PositionalKind::Acpe
    }
}

impl KeyValue for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "depth" => self.depth = parse_value(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "rope_base" => self.rope_base = parse_value(key, v)?,
            "cnn_channels" => self.cnn_channels = parse_list(key, v)?,
            "cnn_kernel" => self.cnn_kernel = parse_value(key, v)?,
            "d_pe" => self.d_pe = parse_value(key, v)?,
            "pe_heads" => self.pe_heads = parse_value(key, v)?,
            "pe_window" => self.pe_window = parse_value(key, v)?,
            "max_patches" => self.max_patches = parse_value(key, v)?,
            "max_channels" => self.max_channels = parse_value(key, v)?,
            "cnn_encoding" => self.cnn_encoding = parse_bool(key, v)?,
            "spectral" => self.spectral = parse_bool(key, v)?,
            "rope" => self.rope = parse_bool(key, v)?,
            "binary_bias" => self.binary_bias = parse_bool(key, v)?,
            "block" => self.block = v.parse()?,
            "positional" => self.positional = v.parse()?,
            "acpe_channels" => self.acpe_channels = parse_value(key, v)?,
            "acpe_kernel" => {
                let (a, b) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("acpe_kernel `{v}` is not HxW")))?;
                self.acpe_kernel = (parse_value(key, a.trim())?, parse_value(key, b.trim())?);
            }
            "init" => self.init = v.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("d_model", self.d_model.to_string()),
            e("heads", self.heads.to_string()),
            e("depth", self.depth.to_string()),
            e("ffn_dim", self.ffn_dim.to_string()),
            e("dropout", self.dropout.to_string()),
            e("rope_base", self.rope_base.to_string()),
            e("cnn_channels", join_list(&self.cnn_channels)),
            e("cnn_kernel", self.cnn_kernel.to_string()),
            e("d_pe", self.d_pe.to_string()),
            e("pe_heads", self.pe_heads.to_string()),
            e("pe_window", self.pe_window.to_string()),
            e("max_patches", self.max_patches.to_string()),
            e("max_channels", self.max_channels.to_string()),
            e("cnn_encoding", self.cnn_encoding.to_string()),
            e("spectral", self.spectral.to_string()),
            e("rope", self.rope.to_string()),
            e("binary_bias", self.binary_bias.to_string()),
            e("block", self.block.to_string()),
            e("positional", self.positional.to_string()),
            e("acpe_channels", self.acpe_channels.to_string()),
            e(
                "acpe_kernel",
                format!("{}x{}", self.acpe_kernel.0, self.acpe_kernel.1),
            ),
            e("init", self.init.to_string()),
        ]
    }
}
