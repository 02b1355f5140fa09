//! Behavior-aware trajectory prediction.
//!
//! Scenes are encoded in ego-centred polar coordinates ([`geometry`]),
//! summarised by graph-centrality behavior features ([`behavior`]), and fed to
//! an LSTM encoder/decoder ([`model`]) built from the blocks in [`nn`] that
//! emits a maneuver-conditioned Gaussian mixture over future positions.
//! [`objective`] holds the losses and optimizer; [`data`] ingests tracks,
//! windows scenes, and generates synthetic traffic.

pub mod behavior;
pub mod data;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod objective;

pub use bat_autodiff as autodiff;
pub use bat_autodiff::{AutodiffError, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("ego position missing at reference frame {0}")]
    MissingEgoFrame(usize),
    #[error("duplicate agent id {0}")]
    DuplicateId(u64),
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
