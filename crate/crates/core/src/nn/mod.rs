//! Tensor substrate: dense arrays, a reverse-mode tape, parameterized
//! layers and finite-difference gradient verification.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradient, grad_check, GradCheckReport};
pub use layers::{
    dwconv_forward, gcn_forward, linear_forward, Conv2dLayer, DepthwiseConv, GcnLayer, GcnStack,
    LayerNorm, LinearLayer,
};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
