//! Experiment orchestration: the pretraining-by-label matrix, the
//! out-of-distribution comparison of batching strategies, and report
//! rendering from persisted artifacts.

pub mod config;
pub mod manifest;
pub mod matrix;
pub mod ood;
pub mod pipeline;
pub mod report;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{CohortBundle, ExperimentConfig, ExperimentKind, HeadSettings};
pub use manifest::{file_digest, Artifact, RunManifest, Workspace, MANIFEST_FILE};
pub use matrix::{run_matrix, MatrixResults};
pub use ood::{run_ood, OodResults};
pub use report::{render_report, write_report, Bundle, REPORT_MD};

use crate::error::{Error, Result};
use crate::syncohort::CohortSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortInfo {
    pub id: u16,
    pub name: String,
}

impl From<&CohortSpec> for CohortInfo {
    fn from(s: &CohortSpec) -> Self {
        CohortInfo {
            id: s.cohort_id,
            name: s.name.clone(),
        }
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
