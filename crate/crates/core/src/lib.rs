//! Label-noise-robust image classification.
//!
//! A shared convolutional encoder feeds a classifier, a projection head for
//! contrastive learning and an attention head that mixes the features of
//! same-label mini-groups. Training runs a contrastive warm-up followed by a
//! joint stage whose supervised terms are balanced by learned uncertainty
//! scales. The crate also covers label-noise injection, the mini-group batch
//! sampler, evaluation metrics, dataset loading and a CLI.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
