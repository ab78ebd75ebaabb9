//! Dense matrices, parameters, and the gradient tape.

mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use gradcheck::{
    difference_resolution, grad_check, relative_error, EntryCheck, GradCheckOptions, GradCheckReport, ParamSummary,
};
pub use matrix::Matrix;
pub use param::{Param, ParamId, ParamStore};
pub use tape::{
    bce_with_logit, layer_norm, masked_row_softmax, sigmoid, Activation, Gradients, Tape, Var,
};
