//! Dense matrices, parameters, and the reverse-mode tape every model is
//! built on.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{
    finite_difference_check, relative_error, CoordinateError, GradCheckOptions, GradCheckReport,
};
pub use matrix::{relu, sigmoid, Matrix};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{cross_entropy, norm_transforms, Activation, Gradients, NodeId, Tape, LOG_CLAMP};

pub(crate) use matrix::dot;
