//! Temporal depth estimation from point trajectories.
//!
//! A pinhole camera maps surface patches to image areas that shrink with the
//! square of depth, so the local density of tracked points around a
//! trajectory carries its depth history up to a global scale. This crate
//! implements that idea end to end:
//!
//! * analytic pinhole geometry and the density/depth-ratio relations
//!   ([`geometry`]),
//! * a synthetic rigid-body scene generator producing trajectories,
//!   visibilities, and ground-truth depths ([`synth`]),
//! * a tape-based reverse-mode autodiff engine ([`autodiff`]),
//! * a two-branch track transformer predicting window-wise log depth ratios
//!   ([`model`]), its training loop ([`train`]), and sliding-window inference
//!   with scale matching against per-frame depth maps ([`infer`]),
//! * a handcrafted kernel-density baseline ([`baseline`]),
//! * 3D tracking and depth metrics ([`metrics`]),
//! * a binary track-bundle container ([`bundle`]) and a CLI ([`cli`]).

pub mod autodiff;
pub mod baseline;
pub mod bundle;
pub mod checkpoint;
pub mod cli;
pub mod geometry;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod synth;
pub mod train;
