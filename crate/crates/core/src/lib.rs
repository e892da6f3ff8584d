//! Semi-supervised node importance estimation on heterogeneous graphs.
//!
//! A pair of joint encoder/decoder estimators predicts an importance value
//! and an aleatoric uncertainty per node. Training mixes a heteroscedastic
//! loss on labeled nodes with pseudo-labels produced by MC-dropout
//! ensembling of both estimators on unlabeled nodes.

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
