//! Soft mixture-of-experts routing laboratory.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod soft_moe;
pub mod sparse;
pub mod tensor;
pub mod variants;

pub use autodiff::{Bindings, Gradients, Graph, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use rng::{glorot_init, Rng};
pub use tensor::Tensor;
