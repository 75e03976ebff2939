//! Numerical laboratory for spectral Bellman representation learning on
//! exactly solvable finite MDPs.
//!
//! Every routine is generic over the scalar type through [`scalar::Real`];
//! the aliases below fix it to `f64`, which is what the verification suites
//! and the command-line tool use.

pub mod agent;
pub mod bellman;
pub mod error;
pub mod features;
pub mod harness;
pub mod ibe;
pub mod io;
pub mod linalg;
pub mod lp;
pub mod mdp;
pub mod scalar;
pub mod seeds;
pub mod spectral;

pub use error::{Error, Result};

pub type Mdp = mdp::TabularMdp<f64>;
pub type Policy = mdp::PolicyTable<f64>;
pub type LinearMdp = mdp::LinearMdp<f64>;
pub type QTable = bellman::QTable<f64>;
pub type Features = features::FeatureMap<f64>;
