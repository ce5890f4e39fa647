//! Vehicle forward-speed estimation from smartphone IMU sequences.
//!
//! The pipeline has two learned parts. A noise-compensation network maps
//! per-second time-domain IMU features (plus a reference speed) to an
//! additive velocity correction, and a motion-transformation network maps
//! per-second accelerometer pre-integrations to phone-to-vehicle Euler
//! angles. Their outputs combine into a per-second forward velocity
//! increment that is trained against GNSS speed with a delay-tolerant loss.
//!
//! Modules, bottom-up:
//!
//! - [`geom`]: Euler angles, rotations, gravity reference
//! - [`simkit`]: ground-truth motion, IMU/GNSS synthesis, on-disk datasets
//! - [`featkit`]: 1 s windowing, feature extraction, pre-integration
//! - [`nncore`]: tape-based reverse-mode autodiff, layers, Adam, schedules
//! - [`models`]: the two networks and their composition
//! - [`trainer`]: splits, augmentation, losses, training loop
//! - [`evalkit`]: horizon metrics and baselines
//! - [`checkpoint`] / [`config`]: persistence and run configuration

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod featkit;
pub mod geom;
pub mod models;
pub mod nncore;
pub mod simkit;
pub mod trainer;

pub use error::{Error, Result};
