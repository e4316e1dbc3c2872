//! Dense `f64` tensors, a reverse-mode gradient tape, an adaptive-moment
//! optimizer and a finite-difference gradient checker.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamSet};
pub use tape::{huber_slope, huber_value, sigmoid_scalar, Activation, Axis, Gradients, Graph, Var};
pub use tensor::Tensor;
