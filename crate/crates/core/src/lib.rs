//! Gate-shift networks and attention-recurrent (LSTA-based) video action
//! recognition on a small from-scratch autodiff core, with segment sampling,
//! training protocols, score ensembling and challenge-style metrics.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod egoaco;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gsm;
pub mod gsn;
pub mod kernels;
pub mod lsta;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod videodata;

pub use autograd::{Gradients, OpKind, Tape, Var};
pub use error::{Error, IoContext, Result};
pub use kernels::ConvGeom;
pub use parallel::Parallelism;
pub use params::{Bindings, Init, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
