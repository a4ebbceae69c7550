//! Dense arrays, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod kernels;
mod lstm;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckOptions, GradCheckReport};
pub use kernels::Conv2dSpec;
pub use lstm::{bilstm_layer, lstm_cell, lstm_direction, LstmVars};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var, COMPLEX_ABS_EPS, POW_FLOOR};
pub use tensor::Tensor;

/// Negative slope of every leaky ReLU in the models.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Epsilon inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;
