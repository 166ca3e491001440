//! Ensemble distillation and ensemble distribution distillation for
//! autoregressive sequence-to-sequence correction models.

pub mod decode;
pub mod dirmath;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nnet;
pub mod synthdata;
pub mod uncertainty;

pub use error::{Error, Result};
