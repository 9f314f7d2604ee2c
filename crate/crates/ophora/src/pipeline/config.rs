use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{StageConfig, StageName};
use crate::dynamics::DetectorParams;

use super::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsSection {
    /// Input manifest consumed by the first stage.
    pub input_manifest: PathBuf,
    /// Directory holding `<clip_id>.rgb` raw frame files with `.json` sidecars.
    pub frame_dir: PathBuf,
    pub cache_dir: PathBuf,
    /// Working directory: evolving manifest, subsets, checkpoints, reports.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinerSection {
    /// Offline deterministic backend instead of the HTTP service.
    #[serde(default)]
    pub mock: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    pub exemplar_file: PathBuf,
    #[serde(default = "crate::refiner::default_blocklist")]
    pub blocklist: Vec<String>,
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
}

fn default_model() -> String {
    "default".into()
}

fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacySection {
    #[serde(default)]
    pub mock: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_privacy_prompt")]
    pub prompt: String,
}

fn default_privacy_prompt() -> String {
    crate::privacy::DEFAULT_PROMPT.to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSection {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_true")]
    pub group_by_source: bool,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train_fraction: 0.8,
            group_by_source: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionSection {
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    pub stage1: StageSection,
    pub stage2: StageSection,
    #[serde(default = "default_token_dim")]
    pub token_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_total_steps() -> usize {
    50
}

fn default_token_dim() -> usize {
    8
}

fn default_hidden() -> usize {
    32
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            total_steps: 50,
            stage1: StageSection {
                learning_rate: 0.05,
                batch_size: 8,
                iterations: 500,
                num_workers: 2,
            },
            stage2: StageSection {
                learning_rate: 0.02,
                batch_size: 8,
                iterations: 100,
                num_workers: 2,
            },
            token_dim: 8,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub num_workers: usize,
}

impl StageSection {
    pub fn to_stage_config(&self, name: StageName) -> StageConfig {
        StageConfig {
            name,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            iterations: self.iterations,
            num_workers: self.num_workers,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSection {
    #[serde(default = "default_omega")]
    pub omega: f64,
}

fn default_omega() -> f64 {
    crate::metrics::DEFAULT_OMEGA
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            omega: crate::metrics::DEFAULT_OMEGA,
        }
    }
}

/// Whole-pipeline configuration, read from TOML. Secrets (API keys) come
/// from the environment, never the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsSection,
    #[serde(default)]
    pub detector: DetectorParams,
    pub refiner: RefinerSection,
    pub privacy: PrivacySection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    /// Preprocess target resolution; 720x480 unless scaled down for tests.
    #[serde(default = "default_target_w")]
    pub target_width: u32,
    #[serde(default = "default_target_h")]
    pub target_height: u32,
}

fn default_target_w() -> u32 {
    crate::frames::TARGET_WIDTH
}

fn default_target_h() -> u32 {
    crate::frames::TARGET_HEIGHT
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let err = |message: String| PipelineError::Config {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let config: PipelineConfig = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        config.validate().map_err(err)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.paths.input_manifest.exists() {
            return Err(format!(
                "input manifest {} does not exist",
                self.paths.input_manifest.display()
            ));
        }
        if !self.refiner.exemplar_file.exists() {
            return Err(format!(
                "exemplar file {} does not exist",
                self.refiner.exemplar_file.display()
            ));
        }
        self.detector.validate()?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err("train_fraction must lie in (0,1)".into());
        }
        if self.diffusion.stage2.iterations > 0
            && self.diffusion.stage2.learning_rate >= self.diffusion.stage1.learning_rate
        {
            return Err("stage2 learning_rate must be below stage1".into());
        }
        Ok(())
    }

    /// Evolving working manifest inside out_dir.
    pub fn working_manifest(&self) -> PathBuf {
        self.paths.out_dir.join("manifest.jsonl")
    }

    pub fn privacy_subset_path(&self) -> PathBuf {
        self.paths.out_dir.join("privacy_subset.jsonl")
    }

    pub fn processed_dir(&self) -> PathBuf {
        self.paths.out_dir.join("processed")
    }
}
