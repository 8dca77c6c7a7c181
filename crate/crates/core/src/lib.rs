//! Actor-critic recommendation with explicit user-item interaction state
//! modeling.
//!
//! The numerical modules are generic over [`numkit::Scalar`]; the aliases
//! below fix the scalar to `f64`, which is what the pipeline and the CLI use.

pub mod agent;
pub mod baselines;
pub mod datasets;
pub mod envloop;
pub mod numkit;
pub mod pmf;
pub mod replay;
pub mod staterep;

mod error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};

pub type Tensor = numkit::Tensor<f64>;
pub type Param = numkit::Param<f64>;
pub type Graph = numkit::Graph<f64>;
pub type EmbeddingTable = pmf::EmbeddingTable<f64>;
pub type StateRep = staterep::StateRep<f64>;
pub type StateVec = staterep::StateVec<f64>;
pub type AgentBundle = agent::AgentBundle<f64>;
pub type Transition = replay::Transition<f64>;
