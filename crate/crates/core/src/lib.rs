//! Acoustic source localization with learned GCC-PHAT delay likelihoods.
//!
//! Pipeline: [`dsp`] frames audio and computes pairwise GCC-PHAT lag vectors,
//! [`net`] maps them to Gaussian delay likelihoods, [`srp`] sums either kind
//! over a grid of candidate positions and picks the maximum. [`sim`]
//! renders labelled shoebox-room recordings, [`dataio`] reads and writes the
//! files involved and [`eval`] scores position estimates.

pub mod dataio;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod net;
pub mod pipeline;
pub mod sim;
pub mod srp;

pub use error::{Error, Result};
