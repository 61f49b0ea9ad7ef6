//! Frozen base networks, losses and the two update rules.

pub mod io;
mod loss;
mod model;
mod optim;

pub use loss::{cross_entropy_loss, mse_loss, Loss, Target};
pub use model::{
    AdapterVar, AdapterVars, AttentionBlock, BindAdapters, Input, InputSpec, Layer, LinearLayer, Model,
};
pub use optim::{adamw_step, sgd_step, AdamWConfig, AdamWState};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("binding error: {0}")]
    Binding(String),
    #[error("invalid model: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
