//! Dense matrix arithmetic and reverse-mode differentiation for exactly the
//! operations the model needs, plus the Adam optimizer.

pub mod adam;
pub mod batchnorm;
pub mod loss;
pub mod matrix;
pub mod tape;

pub use adam::{adam_step, AdamHyper, ParamId, ParamStore};
pub use batchnorm::{batchnorm_forward, BatchNormState, BnMode};
pub use loss::{bce_with_logits, sigmoid};
pub use matrix::{Matrix, NumericError};
pub use tape::{Gradients, Tape, ValueId};
