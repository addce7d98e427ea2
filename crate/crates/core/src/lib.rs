//! Photon-echo simulation for inhomogeneously broadened two-level ensembles
//! and bilinear Koopman surrogates (BE, BERG) trained on short RK4 snapshots.

// `!(x > 0.0)` style checks are used so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod integrate;
pub mod koopman;
pub mod metrics;
pub mod model_io;
pub mod physics;

pub use error::{Error, Result};
