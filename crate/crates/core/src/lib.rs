//! Learned scalar quantization for hybrid analog/digital receivers.
//!
//! A hybrid receiver maps `n` analog observations through an analog dense
//! stack onto `p` lanes, quantizes every lane with the same scalar quantizer,
//! and recovers the task vector in a digital dense stack. The quantizer is
//! trained as a sum of shifted tanh functions and hardened into a step
//! function for deployment.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod hybrid;
pub mod mimo;
pub mod net;
pub mod quantizer;
pub mod rng;

pub use error::{Error, Result};
