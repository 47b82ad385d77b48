//! Pretraining sentence representations with joint span denoising and
//! contrastive learning over LCS-mined sentence pairs.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lcs;
pub mod masking;
pub mod miner;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod selftest;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{GurError, Result};
