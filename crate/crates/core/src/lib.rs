//! Moment-set alignment of untrimmed video features with narrations.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the pipeline and
//! the gradient checks use.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod scalar;
pub mod temporal;
pub mod datagen;
pub mod model;
pub mod matching;
pub mod train;
pub mod eval;
pub mod config;
pub mod checkpoint;
pub mod pipeline;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type Adam = numerics::Adam<f64>;
pub type TemporalTable = temporal::TemporalTable<f64>;
pub type ConceptVocabulary = datagen::ConceptVocabulary<f64>;
pub type VideoRecord = datagen::VideoRecord<f64>;
pub type Model = model::Model<f64>;
pub type MomentPrediction = model::MomentPrediction<f64>;
pub type GroundTruthSet = matching::GroundTruthSet<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
