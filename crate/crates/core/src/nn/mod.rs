//! Minimal CPU tensor engine: NCHW tensors, layers with explicit backward
//! passes, and Adam.

pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use layers::{ConvAlgo, Layer, Param, ParamKind};
pub use loss::{bce_loss, mse_loss, PROB_EPS};
pub use optim::Adam;
pub use tensor::{Scalar, Tensor};
