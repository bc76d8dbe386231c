pub mod attention;
pub mod autograd;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod weights_io;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
