//! Compact feedforward network library built around one idea: a batch-
//! normalized network carries per-domain feature statistics that can be
//! re-estimated on unlabeled data from a new domain and swapped in without
//! touching a single learned weight.
//!
//! The crate provides:
//! - a dense/convolutional tensor core with exact-gradient layers
//!   ([`tensor`], [`layers`], [`model`], [`gradcheck`]),
//! - SGD training with a stepped learning-rate schedule ([`train`]),
//! - streaming per-domain statistics estimation and the weight-preserving
//!   swap itself ([`adabn`]),
//! - synthetic covariate-shift dataset generators ([`data`]),
//! - measurement tools: domain separability of batch statistics, per-feature
//!   symmetric KL divergence, and target-size sensitivity ([`analysis`]),
//! - byte-exact single-file checkpoints ([`checkpoint`]) and stock
//!   benchmark setups ([`presets`]).
//!
//! Every random choice descends from one `u64` master seed through tagged
//! derivation ([`rng`]), so identical inputs give bit-identical outputs.

// numeric kernels index several buffers in lockstep; explicit indices keep
// the math legible where iterator chains would obscure it
#![allow(clippy::needless_range_loop)]

pub mod adabn;
pub mod analysis;
mod binio;
pub use binio::BinReadError;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod presets;
pub mod rng;
pub mod tensor;
pub mod train;
