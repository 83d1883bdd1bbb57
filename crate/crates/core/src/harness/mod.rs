//! Datasets, metrics, experiment configs and the command-line front end.

pub mod cli;
mod config;
mod data;
mod demo;
mod matching;

use std::path::Path;

use serde_json::json;
use thiserror::Error;

use crate::identify::IdentifyError;
use crate::network::NetworkError;
use crate::objective::ObjectiveError;
use crate::splitter::SplitError;

pub use config::{
    run_experiment, synthesize_checkpoint, DatasetSpec, ExperimentConfig, ExperimentSummary, IdentifySpec, ModelSpec, ParamSource,
    ReconstructSpec, TrainSpec,
};
pub use data::{fmt_f64, gen_synthetic, read_dataset_csv, read_matrix_csv, write_dataset_csv, write_matrix_csv, REDRAW_BUDGET};
pub use demo::{demo_nonidentifiable, kkt_residual_vector, DemoReport, DEMO_TOL};
pub use matching::{
    abs_cosine, candidate_points, component_points, match_components, min_cost_assignment, sign_invariant_l2, MatchPair, MatchReport,
    EXACT_LIMIT,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: parse error: {message}")]
    Parse { path: String, message: String },
    #[error("no admissible draw after {attempts} attempts")]
    GenerationFailed { attempts: usize },
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

impl HarnessError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::GenerationFailed { .. } => "generation_failed",
            Self::Check(_) => "check_failed",
            Self::Network(_) => "network",
            Self::Identify(_) => "identify",
            Self::Objective(_) => "objective",
            Self::Split(_) => "split",
        }
    }

    /// 1 for configuration and input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Io { .. } | Self::Parse { .. } => 1,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            Self::Config { field, .. } => v["field"] = json!(field),
            Self::Io { path, .. } | Self::Parse { path, .. } => v["path"] = json!(path),
            _ => {}
        }
        v
    }
}

pub(crate) fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn ensure_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Config echo, seed and versions. The timestamp is the only field that varies
/// between identical runs.
pub fn write_run_meta(dir: &Path, command: &str, config: serde_json::Value, seed: Option<u64>) -> Result<(), HarnessError> {
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    write_json(
        &dir.join("run_meta.json"),
        &json!({
            "command": command,
            "config": config,
            "seed": seed,
            "versions": { env!("CARGO_PKG_NAME"): env!("CARGO_PKG_VERSION") },
            "timestamp": timestamp,
        }),
    )
}
