//! Desk-scale cross-lingual medical vision-language pre-training.
//!
//! The crate covers the full pipeline: a synthetic bilingual image/report
//! generator ([`synth`]), vocabulary extension and masking ([`text`]), a small
//! reverse-mode tensor engine ([`numeric`]), toy encoders and projectors
//! ([`model`]), the alignment objectives ([`losses`]), the two training stages
//! ([`train`]) and zero-shot / bias diagnostics ([`eval`]).

pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use numeric::{Graph, Tensor, Var};
