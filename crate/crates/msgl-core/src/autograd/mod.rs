//! Dense-tensor engine with reverse-mode gradient evaluation.
//!
//! Supplies every numeric primitive the model needs: matrix products,
//! softmax variants, layer normalization, masked attention, dropout and the
//! finite-difference gradient checker used as its own quality gate.

mod attention;
mod gradcheck;
mod tape;
mod tensor;

pub use attention::{masked_multihead_attention, MhaWeights};
pub use gradcheck::{check_gradients, check_param_gradients, relative_error};
pub use tape::{Tape, Var};
pub use tensor::{AttentionMask, MaskKind, Tensor, TensorError};
