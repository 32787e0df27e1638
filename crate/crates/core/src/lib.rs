//! Kronecker-structured weight distributions for stochastic neural networks.

pub mod bandit;
pub mod error;
pub mod flow;
pub mod kl;
pub mod linalg;
pub mod pacbayes;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
pub use flow::{Family, WeightDistribution, WeightShape};
pub use tensor::{Graph, RandomStream, Tensor, Var};
