//! Training, evaluation, export and ablation harness around `bat-core`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod export;
pub mod train;

use std::path::Path;

use bat_core::data::{read_scene_cache, split_dataset, synth_generate, write_scene_cache, DatasetSplit, Scene};
use bat_core::CoreError;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch} batch {batch}{}", .saved.as_ref().map(|p| format!("; last good checkpoint at {p}")).unwrap_or_default())]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        saved: Option<String>,
    },
    #[error("{0}")]
    Eval(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl HarnessError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Checkpoint(_) => "checkpoint",
            HarnessError::NonFiniteLoss { .. } => "non_finite_loss",
            HarnessError::Eval(_) => "eval",
            HarnessError::Io(_) => "io",
            HarnessError::Core(e) => match e {
                CoreError::InvalidInput(_) => "invalid_input",
                CoreError::MissingEgoFrame(_) => "missing_ego_frame",
                CoreError::DuplicateId(_) => "duplicate_id",
                CoreError::NonConvergence { .. } => "non_convergence",
                CoreError::NonFinite(_) => "non_finite",
                CoreError::MissingColumn(_) => "missing_column",
                CoreError::Parse { .. } => "parse",
                CoreError::Empty(_) => "empty",
                CoreError::UnknownParameter(_) => "unknown_parameter",
                CoreError::Format(_) => "format",
                CoreError::Autodiff(_) => "autodiff",
                CoreError::Io(_) => "io",
            },
        }
    }

    /// Human-readable detail.
    pub fn message(&self) -> String {
        self.to_string()
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Ok(read_scene_cache(std::io::BufReader::new(file))?)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Ok(write_scene_cache(std::io::BufWriter::new(file), scenes)?)
}

/// All scenes named by the config: the cache file, or else the synthetic
/// recipes concatenated in order.
pub fn resolve_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    match &cfg.data {
        Some(path) => read_scenes(path),
        None => {
            let mut all = Vec::new();
            for spec in cfg.synth_specs() {
                all.extend(synth_generate(&spec)?);
            }
            Ok(all)
        }
    }
}

pub fn resolve_splits(cfg: &RunConfig) -> Result<DatasetSplit> {
    let scenes = resolve_scenes(cfg)?;
    Ok(split_dataset(
        &scenes,
        cfg.split_fractions,
        cfg.split_mode,
        cfg.split_seed,
        cfg.subsample,
    )?)
}
