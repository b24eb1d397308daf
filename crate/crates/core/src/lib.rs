//! Factor-graph MAP inference, the FGNN layer, and constructive emulation of
//! max-product belief propagation by FGNN stacks.
//!
//! The crate is organised bottom-up:
//!
//! * [`numkit`]: tensors, matrices, dense ReLU networks.
//! * [`pgm`]: factor graphs, scoring, exact MAP oracles.
//! * [`maxprod`]: synchronous max-product in direct and decomposed form.
//! * [`decomp`]: max-decomposition of factor tables.
//! * [`fgnn`]: FGNN layers, stacks and the MPNN rewrite.
//! * [`exactparam`]: hand-built parameters that make an FGNN run max-product.
//! * [`learn`]: reverse-mode gradients and training.
//! * [`synth`]: synthetic chain benchmarks with exact labels.

mod error;

pub mod decomp;
pub mod exactparam;
pub mod fgnn;
pub mod learn;
pub mod maxprod;
pub mod numkit;
pub mod pgm;
pub mod synth;

pub use error::{Error, Result};

// Compiles the guide's snippets as doctests so the book cannot drift.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/factor-graphs.md")]
    mod factor_graphs {}
    #[doc = include_str!("../../../book/src/max-product.md")]
    mod max_product {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/fgnn-layers.md")]
    mod fgnn_layers {}
    #[doc = include_str!("../../../book/src/exact-emulation.md")]
    mod exact_emulation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
