pub mod autograd;
pub mod bench;
pub mod config;
pub mod conv;
pub mod cost;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod lka;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use tensor::{LabelMap, Real, Tensor};
