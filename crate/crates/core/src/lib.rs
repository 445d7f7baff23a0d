//! Conditional density estimation with radial normalising flows whose
//! parameters are predicted by a variational Bayesian MLP.

pub mod autoreg;
pub mod bnn;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod heads;
pub mod inference;
pub mod numeric;
pub mod prior;
pub mod tape;

pub use error::{Error, Result};
