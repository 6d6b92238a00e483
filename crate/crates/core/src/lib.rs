//! Block-sparse attention laboratory core.
//!
//! Everything here is pure computation over in-memory buffers: a small
//! reverse-mode tensor tape, full and top-k block-sparse attention, a tiny
//! decoder-only transformer with a dual-stream (full / sparse) forward pass,
//! the alignment losses and optimizer that train it, attention diagnostics,
//! synthetic corpora and perplexity-style evaluation.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature (enable `libm` for float math in that configuration). File
//! formats, configuration and the command line live in the companion
//! `ssa-lab` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod metrics;
pub mod model;
pub mod real;
pub mod tensor;
pub mod training;

pub use attention::{AttnConfig, AttnMode, BlockSelection};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig, StreamOutput};
pub use training::{TrainConfig, Trainer};

pub use real::Real;
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
