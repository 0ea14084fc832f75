//! Seer-decoder training for encoder-decoder transformers.
//!
//! The crate bundles a small reverse-mode autograd engine, a Transformer
//! encoder and conventional decoder, the seer decoder (past and future
//! subdecoders plus a fusion layer), the knowledge-transfer mechanisms that
//! couple the two decoders during training, decoding, and the analysis
//! instruments used to study what the conventional decoder learns.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use kernels::AttnMask;
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/seer-decoder.md")]
    mod seer_decoder {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
