//! Desk-scale latent-diffusion reference engine: noise schedule, latent
//! patchification, forward noising and its squared-error training loss,
//! interval-partitioned timestep sampling, DDPM-style reverse steps and the
//! two-stage progressive tuning loop over a pluggable toy denoiser.

mod denoiser;
mod schedule;
mod tokens;
mod train;

pub use denoiser::{Denoiser, OracleDenoiser, ToyDenoiser};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleKind};
pub use tokens::{
    add_noise, concat_text, diffusion_loss, patchify, split_at_boundary, unpatchify, LatentVideo,
    TokenKind, TokenSequence,
};
pub use train::{
    read_checkpoint, reverse_step, run_progressive, run_stage, sample_timestep, worker_interval,
    write_checkpoint, write_trace_csv, Checkpoint, DataSampler, FixedDataset, StageConfig,
    StageName, TracePoint,
};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("total diffusion steps must be >= 1, got {0}")]
    BadSteps(usize),
    #[error("axis {axis} of size {size} not divisible by rate {rate}")]
    NotDivisible {
        axis: &'static str,
        size: usize,
        rate: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("timestep {t} outside [1,{total}]")]
    TimestepOutOfRange { t: usize, total: usize },
    #[error("worker partition requires 1 <= N <= T, got N={n}, T={t}")]
    BadPartition { n: usize, t: usize },
    #[error("alpha_bar must lie in (0,1], got {0}")]
    BadAlphaBar(f64),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("stage-2 learning rate {stage2} must be below stage-1 rate {stage1}")]
    LearningRateOrder { stage1: f64, stage2: f64 },
    #[error("checkpoint io: {0}")]
    Checkpoint(String),
}
