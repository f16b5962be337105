//! Federated recovery of sparse vehicle trajectories on road networks.
//!
//! Clients hold private trajectory datasets and cooperatively train a
//! small encoder/decoder that fills in missing GPS samples as map-matched
//! `(segment, ratio)` points. See the `examples/` directory for runnable
//! walkthroughs of each stage.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod roadnet;
pub mod seed;
pub mod trajdata;

pub use error::{Error, Result};
