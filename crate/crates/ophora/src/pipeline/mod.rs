//! Stage-by-stage orchestration: configuration, the curate → refine →
//! privacy → preprocess → split → tune → eval dependency chain with
//! resumable, atomically-written outputs, and the corpus report.

mod config;
mod report;
mod stages;

pub use config::{
    DiffusionSection, MetricsSection, PathsSection, PipelineConfig, PrivacySection, RefinerSection,
    SplitSection,
};
pub use report::{build_report, render_report_text, CorpusReport};
pub use stages::{run_refine_with, run_stage_cmd, toy_latents, toy_text_embedding, Stage, StageReport};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("stage {stage} requires {missing} to run first")]
    MissingPrerequisite { stage: String, missing: String },
    #[error(transparent)]
    Manifest(#[from] crate::corpus::ManifestError),
    #[error(transparent)]
    Frames(#[from] crate::frames::FrameError),
    #[error(transparent)]
    Refine(#[from] crate::refiner::RefineError),
    #[error(transparent)]
    Privacy(#[from] crate::privacy::PrivacyError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Chat(#[from] crate::chat::ChatError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}
