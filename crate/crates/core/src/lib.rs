//! Channel-equivariant EEG transformer in double precision.
//!
//! [`tensor`] and [`autodiff`] form a small reverse-mode engine; [`signal`]
//! turns raw recordings into `C x N x 200` patch grids; [`model`] holds the
//! patch encoder, sliding positional encoding and attention stack;
//! [`train`] covers masked-patch pretraining, fine-tuning and metrics;
//! [`verify`] checks the symmetry properties numerically.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dft;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod params;
pub mod perm;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, RotaryTable, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
