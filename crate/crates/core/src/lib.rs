pub mod baselines;
pub mod controller;
pub mod critic;
pub mod grpo;
pub mod jsgrpo;
mod error;
pub mod numerics;
pub mod policy;
pub mod prompting;
pub mod rollout;
pub mod sim;

pub use error::{Error, Result};
pub use numerics::Scalar;

pub type Tensor = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph = numerics::Graph<f64>;
pub type AdamState = numerics::AdamState<f64>;
