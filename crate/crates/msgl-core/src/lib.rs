//! Pose-sequence behavior recognition with a multi-scale global-local
//! transformer.
//!
//! The crate covers the full pipeline: dataset ingestion, the preprocessing
//! chain (imputation, standardization, sliding windows), the model itself,
//! label-smoothing training with plateau scheduling and early stopping, and
//! the evaluation/reporting stack including boundary-distance analysis.

pub mod autograd;
pub mod rng;

pub use autograd::{
    check_gradients, check_param_gradients, masked_multihead_attention, AttentionMask, MaskKind,
    MhaWeights, Tape, Tensor, TensorError, Var,
};
pub use rng::RngStream;
