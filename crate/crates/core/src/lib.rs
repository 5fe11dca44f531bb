//! Interference-motion removal for Doppler-radar vital signs.
//!
//! The crate covers the whole chain: scattering-point signal models and a
//! synthetic vital-sign source ([`signal_model`]), a walking-in-place foot
//! interference simulator ([`gait_sim`]), STFT and decimation plumbing
//! ([`dsp`]), mixture synthesis and the on-disk dataset container
//! ([`pipeline`]), the variational encoder-decoder with its training loop
//! ([`vaenet`]) and the bin-error / SIR x noise sweep evaluation ([`eval`]).

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dsp;
pub mod error;
pub mod eval;
pub mod gait_sim;
pub mod pipeline;
pub mod seed;
pub mod signal_model;
pub mod vaenet;

pub use error::{Error, ErrorKind, Result};
