//! Nested subspace networks.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod nn;
pub mod surgery;
pub mod training;

pub use error::{NsnError, Result};
pub use linalg::{seeded_rng, svd, Matrix, RandomStream, SvdResult};
pub use nn::{
    break_even_rank, flops_linear, model_flops, Activation, Block, DenseLayer, Layer, Model, NsnLayer, RankSpec,
};
