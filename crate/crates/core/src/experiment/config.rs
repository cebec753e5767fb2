//! JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::PretrainConfig;
use crate::error::{Error, Result};
use crate::nn::head::{HeadConfig, Task};
use crate::nn::EncoderConfig;
use crate::rng;
use crate::signal::{AugmentConfig, PreprocessConfig};
use crate::syncohort::{paperlike3, CohortSpec};

/// Split sizes at full scale: training, validation and test records per
/// cohort in the pretrain-by-label matrix, and evaluation subset size.
pub const FULL_TRAIN: f64 = 10_000.0;
pub const FULL_VAL: f64 = 2_000.0;
pub const FULL_TEST: f64 = 2_000.0;
pub const FULL_OOD_SUBSET: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Matrix,
    Ood,
}

/// Either a named preset or explicit cohort specifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CohortBundle {
    Preset {
        preset: String,
        n_patients: usize,
        seed: u64,
    },
    Explicit(Vec<CohortSpec>),
}

impl CohortBundle {
    pub fn resolve(&self) -> Result<Vec<CohortSpec>> {
        let specs = match self {
            CohortBundle::Preset {
                preset,
                n_patients,
                seed,
            } => match preset.as_str() {
                "paperlike3" => paperlike3(*n_patients, *seed),
                other => return Err(Error::Config(format!("unknown cohort preset {other:?}"))),
            },
            CohortBundle::Explicit(specs) => specs.clone(),
        };
        let mut ids: Vec<u16> = specs.iter().map(|s| s.cohort_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != specs.len() {
            return Err(Error::Config("duplicate cohort ids".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSettings {
    pub age: HeadConfig,
    pub sex: HeadConfig,
}

impl Default for HeadSettings {
    fn default() -> Self {
        HeadSettings {
            age: HeadConfig::preset(Task::AgeRegression),
            sex: HeadConfig::preset(Task::SexClassification),
        }
    }
}

impl HeadSettings {
    pub fn for_task(&self, task: Task) -> &HeadConfig {
        match task {
            Task::AgeRegression => &self.age,
            Task::SexClassification => &self.sex,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub cohorts: CohortBundle,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub heads: HeadSettings,
    /// Head-training runs; defaults to 6 (matrix) or 10 (ood).
    #[serde(default)]
    pub runs: Option<usize>,
    /// Base seed from which per-run seeds are derived.
    #[serde(default)]
    pub seed: u64,
    /// Explicit per-run seeds, one per run.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Multiplier on the full-scale split and subset sizes.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Cohort whose labels train the heads in the ood experiment.
    #[serde(default)]
    pub head_cohort: u16,
    /// Records per cohort used by the cohort probe and the PCA export.
    #[serde(default = "default_probe_per_cohort")]
    pub probe_per_cohort: usize,
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
}

fn default_scale() -> f64 {
    0.05
}

fn default_probe_per_cohort() -> usize {
    300
}

fn default_bin_width() -> f64 {
    crate::eval::report::DEFAULT_BIN_WIDTH
}

impl ExperimentConfig {
    /// Laptop-scale defaults on the three-cohort synthetic bundle.
    pub fn desk(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            cohorts: CohortBundle::Preset {
                preset: "paperlike3".into(),
                n_patients: 300,
                seed: 1,
            },
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig {
                batch_pairs: 64,
                ..Default::default()
            },
            heads: HeadSettings::default(),
            runs: None,
            seed: 0,
            seeds: None,
            scale: default_scale(),
            head_cohort: 0,
            probe_per_cohort: default_probe_per_cohort(),
            bin_width: default_bin_width(),
        }
    }

    /// A much smaller encoder and shorter crops on the desk bundle, sized so
    /// a full experiment finishes in minutes on one core.
    pub fn tiny(kind: ExperimentKind) -> Self {
        let mut cfg = Self::desk(kind);
        cfg.encoder.widths = vec![8, 16, 16, 32];
        cfg.encoder.stem_stride = 2;
        cfg.augment.crop_len = 1200;
        cfg.pretrain.batch_pairs = 32;
        cfg.pretrain.epochs = 30;
        // at 64 views per batch an initial rate of 0.1 can collapse every
        // projection onto one direction within a few epochs
        cfg.pretrain.eta0 = 0.01;
        for h in [&mut cfg.heads.age, &mut cfg.heads.sex] {
            h.lr = 1e-3;
            h.max_epochs = 100;
        }
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn runs(&self) -> usize {
        self.runs.unwrap_or(match self.kind {
            ExperimentKind::Matrix => 6,
            ExperimentKind::Ood => 10,
        })
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        match &self.seeds {
            Some(s) => s[run],
            None => rng::derive_seed(&[self.seed, 0x5eed, run as u64]),
        }
    }

    /// Matrix split sizes (train, val, test) after scaling.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let s = |full: f64| ((full * self.scale).round() as usize).max(1);
        (s(FULL_TRAIN), s(FULL_VAL), s(FULL_TEST))
    }

    pub fn ood_subset(&self) -> usize {
        ((FULL_OOD_SUBSET * self.scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let specs = self.cohorts.resolve()?;
        if specs.len() < 2 {
            return Err(Error::Config(format!(
                "{:?} experiment needs at least two cohorts",
                self.kind
            )));
        }
        let runs = self.runs();
        if runs < 2 {
            return Err(Error::Config("at least two runs are needed for intervals".into()));
        }
        if let Some(s) = &self.seeds {
            if s.len() != runs {
                return Err(Error::Config(format!("{} seeds for {runs} runs", s.len())));
            }
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("scale must be positive".into()));
        }
        if self.kind == ExperimentKind::Ood && !specs.iter().any(|s| s.cohort_id == self.head_cohort) {
            return Err(Error::Config(format!("head cohort {} is not configured", self.head_cohort)));
        }
        if self.augment.crop_len > self.preprocess.window_len {
            return Err(Error::Config("crop_len exceeds the preprocessing window".into()));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::Config("bin_width must be positive".into()));
        }
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.heads.age.validate()?;
        self.heads.sex.validate()?;
        if self.encoder.in_leads != self.preprocess.lead_subset.len() {
            return Err(Error::Config("encoder in_leads must match the lead subset".into()));
        }
        Ok(())
    }
}
