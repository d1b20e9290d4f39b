//! Differentiable proxies for non-differentiable procedural pattern generators.
//!
//! The crate turns black-box pattern generators (brick, stripe, scratches, ...)
//! into something gradient descent can work with:
//!
//! - [`generators`] — deterministic, tileable reference generators `G(θ)` with
//!   mixed discrete/continuous parameter schemas.
//! - [`paramspace`] — parameter normalization to the unit cube, heuristic
//!   sampling, and deterministic dataset construction.
//! - [`proxynet`] / [`proxytrain`] — a parameter-conditioned convolutional
//!   generator `Ĝ(θ)` (no noise inputs, fully deterministic) and its training
//!   loop with an L1 + feature + style loss and an optional adversarial critic.
//! - [`filters`], [`graph`], [`render`] — differentiable filter nodes, the
//!   material-graph DAG producing SVBRDF maps, and a point-light
//!   Cook-Torrance renderer.
//! - [`perceptual`] — feature extractor, Gram matrices, and the style/feature
//!   distances shared by training and optimization.
//! - [`optimize`] — the three-stage pipeline that matches a graph to a target
//!   image and projects the result back onto the original generators.
//!
//! Everything is CPU-only `f64` with fixed evaluation order, so identical
//! inputs and seeds reproduce results bit-for-bit.

pub mod error;
pub mod tensor;
pub mod util;

pub mod generators;
pub mod paramspace;
pub mod perceptual;
pub mod filters;
pub mod graph;
pub mod render;
pub mod proxynet;
pub mod proxytrain;

pub mod optimize;

pub use error::{Error, ErrorKind, Result};
