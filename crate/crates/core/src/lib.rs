//! Inference-time control of analytic diffusion models by replica exchange,
//! with a sequential Monte Carlo baseline over the same machinery.

pub mod ctmc;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod logspace;
pub mod models;
pub mod path;
pub mod rng;
pub mod sde;

pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod smc;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
