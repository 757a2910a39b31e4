//! Audio-language modelling on a small scale: a log-mel frontend, a
//! bidirectional encoder whose intermediate layers are fused, pooled and
//! projected into a causal decoder, a staged training curriculum, synthetic
//! audio tasks and a multiple-choice evaluation harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod audio;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod lm;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use model::{AudioLm, ModelConfig};
pub use params::{ModuleGroup, ParamSet};
