//! Thermal condition monitoring of robot joint motors with a variational
//! autoencoder.
//!
//! The crate learns the distribution of thermally uncritical joint states
//! (positions, velocities, torques), flags overheating-prone motion windows
//! by reconstruction error, scores planned motions with a per-joint thermal
//! difficulty in `[0, 1)`, and samples new uncritical motion profiles. A
//! lumped-parameter thermal plant generates labeled cool and hot corpora for
//! desk-scale experiments.

// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod monitor;
pub mod nn;
pub mod random;
pub mod vae;
