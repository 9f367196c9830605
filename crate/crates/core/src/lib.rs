//! Federated spiking-network simulator.
//!
//! Clients train a spiking network (LIF neurons, batch normalization through
//! time, surrogate-gradient BPTT) on ternary spike trains from receptive-field
//! encoding; a server averages their weights. A conventional CNN with the same
//! layer stack serves as the baseline, and a per-layer FLOPs/energy model
//! compares the two.

pub mod arch;
pub mod checkpoint;
pub mod cli;
pub mod cnn;
pub mod config;
pub mod data;
pub mod encoding;
pub mod energy;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod io;
pub mod kernels;
pub mod nn;
pub mod rng;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
