//! Class-incremental learning with dual-teacher feature distillation and
//! data-free generative replay.
//!
//! The crate trains a single cosine-similarity classifier over a growing set
//! of classes. Each incremental phase combines:
//!
//! * a less-forget constraint against the frozen previous model,
//! * variational feature distillation from two teachers (the old-class model
//!   and a model trained on the new classes) through per-teacher adapter
//!   networks with a shared per-channel variance,
//! * data-free generative replay: a label-conditioned generator trained from
//!   scratch against the frozen old model only (cross-entropy through the
//!   teacher plus a batch-norm statistics matching loss), whose samples feed
//!   a softmax-matching distillation term after weight imprinting.
//!
//! All numerical code is generic over the scalar type ([`scalar::Scalar`]);
//! the training pipeline instantiates it at [`Real`] while tests re-run the
//! same code paths in `f64` for finite-difference gradient checks.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dtid;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod scalar;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};

/// Scalar type used by the training pipeline.
pub type Real = f32;

/// Backbone classifier at pipeline precision.
pub type RealBackbone = backbone::Backbone<Real>;
