//! Discrete flow maps: few-step generative models for categorical sequences
//! whose flow map is parameterized by a simplex-valued mean denoiser.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: interpolant schedules and the scalar coefficients behind
//!   every flow-map identity.
//! - [`simplex`]: softmax / KL / cross-entropy primitives.
//! - [`toy`] and [`oracle`]: exactly enumerable data distributions and the
//!   Bayes-posterior ground truth (drift, flow, mean denoiser).
//! - [`model`]: a small MLP mean denoiser with forward- and reverse-mode
//!   derivatives.
//! - [`losses`]: diagonal cross-entropy plus the semigroup, Lagrangian and
//!   Eulerian self-distillation teachers.
//! - [`sampler`], [`trainer`], [`eval`]: generation, two-stage training and
//!   metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod sampler;
pub mod schedule;
pub mod simplex;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};

/// An `L x K` real matrix: one row per sequence position.
pub type State = ndarray::Array2<f64>;
