//! Desk-scale laboratory for low-overhead channel estimation in TDD mmWave
//! massive-MIMO OFDM systems.
//!
//! The crate covers the whole chain:
//!
//! - [`sim`]: clustered multipath channel traces with Doppler-driven slot
//!   evolution, reciprocity and transceiver calibration asymmetry.
//! - [`pilots`]: comb-structured SRS patterns, antenna-subset selection and
//!   noisy pilot observations.
//! - [`baselines`]: LS coarse estimation plus linear, spline and DFT
//!   interpolation along the subcarrier and antenna axes.
//! - [`autodiff`]: a small tape-based reverse-mode AD engine with an Adam
//!   optimizer and finite-difference gradient checker.
//! - [`sfcen`]: the knowledge-and-data-driven spatial-frequency extrapolator
//!   built from attention-based sub-element extrapolation modules.
//! - [`tudcen`]: convolutional uplink-downlink calibration and a causal
//!   generative Transformer for slot-level downlink extrapolation.
//! - [`training`], [`eval`]: losses, training loops, NMSE, SVD precoding,
//!   achievable sum-rate and sweeps.
//! - [`container`], [`config`]: on-disk dataset/checkpoint format and the
//!   flat key-value run configuration.

pub mod autodiff;
pub mod baselines;
pub mod check;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
mod nn;
pub mod pilots;
pub mod sfcen;
pub mod sim;
pub mod svg;
pub mod training;
pub mod tudcen;

pub use error::{Error, Result};

/// Complex sample type used for all CSI arrays.
pub type C64 = num_complex::Complex64;

/// One slot of CSI, e.g. uplink `[N_T, N_R, N_c]` or downlink `[N_R, N_T, N_c]`.
pub type Csi = ndarray::Array3<C64>;
