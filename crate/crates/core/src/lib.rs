//! Attention with learnable temporal priors inside a small transformer world
//! model, together with the autodiff engine, synthetic tasks and trainer used
//! to study them.

pub mod attention;
pub mod autodiff;
pub mod envs;
pub mod error;
pub mod model;
pub mod optim;
pub mod regularization;
pub mod trainer;

pub use error::{Error, Result};
