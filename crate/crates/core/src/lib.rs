//! Heterogeneous message-passing GNN training with gradient regularization.
//!
//! The crate implements RGCN/RGAT backbones on a small reverse-mode autodiff
//! engine, the Grug regularizer (normalized gradient-ascent perturbation of
//! both the feature matrix and every layer's message matrix), the baselines
//! it generalizes (Dropout, DropNode, DropEdge, DropMessage, FLAG), and
//! harnesses that measure variance, diversity, over-smoothing, robustness
//! and ablations.
//!
//! Module map:
//!
//! * [`tensor`] - dense matrices and the autodiff tape
//! * [`graph`] - heterogeneous graph model, loaders, generator, splits, attack
//! * [`backbone`] - RGCN/RGAT layers with explicit message matrices
//! * [`regularizers`] - perturbation state, drop masks, hooks, epoch protocols
//! * [`training`] - Adam, objectives, the training loop and metrics
//! * [`analysis`] - sweeps, probes and counters
//! * [`oracle`] - forward-only verification of gradients and regularization identities
//! * [`cli`] - configuration, command dispatch and report files

pub mod analysis;
pub mod backbone;
pub mod cli;
pub mod graph;
pub mod oracle;
pub mod regularizers;
pub mod tensor;
pub mod training;

use std::path::PathBuf;

use thiserror::Error;

pub use backbone::{Backbone, Model};
pub use graph::{HeteroGraph, SplitSpec, SynthConfig};
pub use regularizers::{GradRegConfig, Method};
pub use tensor::{Matrix, Tape, Var};
pub use training::{Task, TaskData, TrainConfig};

/// Error type shared by the training, analysis, oracle and cli layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: {0}")]
    Tensor(#[from] tensor::TensorError),
    #[error("graph: {0}")]
    Graph(#[from] graph::GraphError),
    #[error("model: {0}")]
    Model(#[from] backbone::ModelError),
    #[error("config: {0}")]
    Config(String),
    #[error("state: {0}")]
    State(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("probe: {0}")]
    Probe(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
