//! Tiny autoregressive language model with tape-based autodiff.

pub mod gradcheck;
pub mod model;
pub mod tape;
pub mod vocab;

pub use gradcheck::{grad_check, GradCheckError, GradCheckReport};
pub use model::{Decoder, ModelConfig, ModelError, TinyLM};
pub use tape::{Matrix, ScalarOp, Tape, Var};
pub use vocab::{build_vocab, Vocab, VocabError};
