//! Dense tensors, the differentiation tape, gradient checking and Adam.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamState, StepDecay};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use graph::{
    max_over_axis, Activation, Axis, Gradients, Graph, NodeId, COSINE_EPS, LAYER_NORM_EPS,
};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};

pub(crate) use graph::{dot, norm};
