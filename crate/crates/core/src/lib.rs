//! Self-distillation of discrete symbol sequences from frozen visual features.

pub mod autograd;
pub mod config;
pub mod discretize;
pub mod error;
pub mod featstore;
pub mod gradcheck;
pub mod interpret;
pub mod loss;
pub mod netcore;
pub mod probe;
pub mod selfcheck;
pub mod seqgen;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
