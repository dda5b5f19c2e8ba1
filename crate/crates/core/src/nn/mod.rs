//! Differentiable layer primitives: convolution, batch normalisation,
//! pooling, linear maps, channel concatenation and softmax cross-entropy.

pub mod gradcheck;
pub mod layers;
pub mod ops;

pub use gradcheck::{finite_diff_check, GradCheckReport, GradCheckable, ModuleCheck, Projection, TensorFnCheck};
pub use layers::{BatchNormState, Conv2d, Linear, Mode, Param};
