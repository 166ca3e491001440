//! Reverse-mode autodiff core and the tiny encoder-decoder built on it.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tape;

pub use model::{
    concentrations, init_model, Graph, HeadMode, HeadOutput, ModelConfig, SeqModel, Tensor, BOS,
    EOS, NUM_SPECIAL, PAD, UNK,
};
pub use optim::{optimizer_step, AdamConfig, AdamState, StepOutcome};
