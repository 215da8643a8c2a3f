//! Low-rank tensor decomposition as an inference-time defense for
//! vision-language encoders.
//!
//! Activations at chosen layers of an image encoder are replaced by
//! `alpha * T + (1 - alpha) * T_hat`, where `T_hat` is a CP, Tucker or
//! Tensor-Train reconstruction of `T`. The crate also ships the pieces needed
//! to evaluate that defense end to end: a small deterministic image/text
//! encoder pair with exact input gradients, an L-infinity PGD attack, and
//! sweep and benchmark drivers that write CSV/JSON reports.

pub mod attack;
pub mod config;
pub mod decomp;
pub mod defense;
pub mod error;
pub mod harness;
pub mod model;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
