//! Diffusion-based data augmentation for low-resource sentiment classification.
//!
//! A small transformer encoder serves three roles: a proxy classifier whose
//! [CLS] attention scores token importance, a masked diffusion language model
//! that regenerates label-related tokens under a label-aware noise schedule,
//! and the final classifier trained with a noise-resistant objective.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod losses;
pub mod pipeline;
pub mod policies;
pub mod projection;
pub mod rng;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
