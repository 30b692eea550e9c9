//! Dense tensor storage and the differentiable operation set the networks
//! and losses are built from.

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{
    directional_gradcheck, gradcheck, DirectionalReport, GradCheckConfig, GradReport,
};
pub use params::{he_normal, BoundParams, ParamStore};
pub use tape::{Activation, Grads, Tape, Var};
pub use tensor::Tensor;
