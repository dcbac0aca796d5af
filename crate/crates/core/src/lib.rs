//! Simulation and channel-noise tracking for an adaptive photon-counting
//! QPSK receiver.
//!
//! The crate is organised bottom-up:
//!
//! * [`physics`]: displaced coherent-state photon statistics, the PNR
//!   detector and the ideal heterodyne baseline.
//! * [`receiver`]: the L-step adaptive discrimination and the detection
//!   matrix it feeds.
//! * [`noise`]: phase random walk and Ornstein-Uhlenbeck intensity noise.
//! * [`estimate`]: Bayesian grid and neural-network estimators of
//!   `(A, phi)` from a detection matrix.
//! * [`train`]: from-scratch MLP training (weighted MSE, backprop, RMSprop).
//! * [`kalman`], [`calibration`], [`tracking`]: filtering and the closed
//!   tracking loop.
//! * [`harness`]: sweep configuration, execution and CSV output.

pub mod calibration;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod kalman;
pub mod noise;
pub mod physics;
pub mod receiver;
pub mod rng;
pub mod tracking;
pub mod train;

pub use error::{Error, Result};
