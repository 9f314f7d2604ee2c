use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, ToyDenoiser};
use super::schedule::NoiseSchedule;
use super::tokens::{add_noise, concat_text, TokenKind, TokenSequence};
use super::DiffusionError;

/// Bounds of worker i's timestep sub-interval when [1,T] is divided into N
/// contiguous pieces, with the remainder distributed to the earliest
/// intervals: lengths are ceil(T/N) for the first T mod N workers and
/// floor(T/N) for the rest.
pub fn worker_interval(worker: usize, n_workers: usize, total_steps: usize) -> Result<(usize, usize), DiffusionError> {
    if n_workers < 1 || n_workers > total_steps || worker >= n_workers {
        return Err(DiffusionError::BadPartition {
            n: n_workers,
            t: total_steps,
        });
    }
    let base = total_steps / n_workers;
    let remainder = total_steps % n_workers;
    let len_of = |j: usize| if j < remainder { base + 1 } else { base };
    let mut lo = 1;
    for j in 0..worker {
        lo += len_of(j);
    }
    Ok((lo, lo + len_of(worker) - 1))
}

/// Uniform draw from worker i's sub-interval.
pub fn sample_timestep(
    worker: usize,
    n_workers: usize,
    total_steps: usize,
    rng: &mut impl Rng,
) -> Result<usize, DiffusionError> {
    let (lo, hi) = worker_interval(worker, n_workers, total_steps)?;
    Ok(rng.gen_range(lo..=hi))
}

/// One DDPM reverse step:
/// z_{t-1} = (z_t - (1-a_t)/sqrt(1-abar_t) * eps_hat) / sqrt(a_t) + sigma_t * xi
/// with sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t) and sigma_1 = 0.
pub fn reverse_step(
    z_t: &TokenSequence,
    t: usize,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    context: &TokenSequence,
    rng: &mut impl Rng,
) -> Result<TokenSequence, DiffusionError> {
    if t < 1 || t > schedule.total_steps() {
        return Err(DiffusionError::TimestepOutOfRange {
            t,
            total: schedule.total_steps(),
        });
    }
    let seq = concat_text(z_t, context)?;
    let eps_hat = denoiser.predict(&seq, t)?;
    if eps_hat.len() != z_t.len() || eps_hat.dim != z_t.dim {
        return Err(DiffusionError::ShapeMismatch(format!(
            "denoiser produced {}x{}, expected {}x{}",
            eps_hat.len(),
            eps_hat.dim,
            z_t.len(),
            z_t.dim
        )));
    }
    let alpha = schedule.alpha(t);
    let alpha_bar = schedule.alpha_bar(t);
    let sigma = if t == 1 {
        0.0
    } else {
        (schedule.beta(t) * (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - alpha_bar)).sqrt()
    };
    let eps_coef = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let tokens: Vec<Vec<f64>> = z_t
        .tokens
        .iter()
        .zip(&eps_hat.tokens)
        .map(|(zt, et)| {
            zt.iter()
                .zip(et)
                .map(|(z, e)| {
                    let xi: f64 = if sigma > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                    inv_sqrt_alpha * (z - eps_coef * e) + sigma * xi
                })
                .collect()
        })
        .collect();
    TokenSequence::new(tokens, z_t.dim, TokenKind::Vision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    TransferPretrain,
    PrivacyFinetune,
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageName::TransferPretrain => write!(f, "transfer_pretrain"),
            StageName::PrivacyFinetune => write!(f, "privacy_finetune"),
        }
    }
}

/// Hyperparameters of one training stage. The corpus-scale reference values
/// are (1e-4, 128, 65000) for transfer pre-training and (5e-5, 128, 4500)
/// for privacy fine-tuning; desk runs scale these down.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: StageName,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub num_workers: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate >= 0.0) {
            return Err("learning_rate must be >= 0".into());
        }
        if self.batch_size == 0 || self.num_workers == 0 {
            return Err("batch_size and num_workers must be positive".into());
        }
        Ok(())
    }
}

/// Provider of (clean vision tokens, text tokens) training pairs. Text and
/// latent providers are frozen: only the denoiser parameters train.
pub trait DataSampler {
    fn sample(&self, rng: &mut impl Rng) -> (TokenSequence, TokenSequence)
    where
        Self: Sized;
}

/// Finite dataset sampled uniformly.
#[derive(Debug, Clone)]
pub struct FixedDataset {
    pub items: Vec<(TokenSequence, TokenSequence)>,
}

impl DataSampler for FixedDataset {
    fn sample(&self, rng: &mut impl Rng) -> (TokenSequence, TokenSequence) {
        let idx = rng.gen_range(0..self.items.len());
        self.items[idx].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub stage: StageName,
    pub iteration: usize,
    pub loss: f64,
}

/// Plain stochastic-gradient minimization of the noise-prediction loss.
/// Each batch element is assigned to a simulated worker round-robin and its
/// timestep drawn from that worker's sub-interval.
pub fn run_stage(
    cfg: &StageConfig,
    schedule: &NoiseSchedule,
    denoiser: &mut ToyDenoiser,
    data: &FixedDataset,
    rng: &mut impl Rng,
) -> Result<Vec<TracePoint>, DiffusionError> {
    cfg.validate()
        .map_err(DiffusionError::ShapeMismatch)?;
    let total_steps = schedule.total_steps();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut grad_acc = vec![0.0; denoiser.params().len()];
        let mut loss_acc = 0.0;
        for b in 0..cfg.batch_size {
            let worker = b % cfg.num_workers;
            let t = sample_timestep(worker, cfg.num_workers, total_steps, rng)?;
            let (z, text) = data.sample(rng);
            let eps_tokens: Vec<Vec<f64>> = z
                .tokens
                .iter()
                .map(|tok| tok.iter().map(|_| StandardNormal.sample(rng)).collect())
                .collect();
            let eps = TokenSequence::new(eps_tokens, z.dim, TokenKind::Vision)?;
            let z_t = add_noise(&z, &eps, schedule.alpha_bar(t))?;
            let seq = concat_text(&z_t, &text)?;
            let (loss, grad) = denoiser.loss_and_grad(&seq, t, &eps)?;
            loss_acc += loss;
            for (g, d) in grad_acc.iter_mut().zip(&grad) {
                *g += d;
            }
        }
        let batch = cfg.batch_size as f64;
        let loss = loss_acc / batch;
        if !loss.is_finite() {
            return Err(DiffusionError::NonFiniteLoss(iteration));
        }
        let lr = cfg.learning_rate;
        for (p, g) in denoiser.params_mut().iter_mut().zip(&grad_acc) {
            *p -= lr * g / batch;
        }
        trace.push(TracePoint {
            stage: cfg.name,
            iteration,
            loss,
        });
    }
    Ok(trace)
}

/// Two-stage progressive tuning: stage 2 continues from stage 1's
/// parameters at a strictly lower learning rate; a checkpoint is written
/// after each stage.
pub fn run_progressive(
    stage1: &StageConfig,
    stage2: &StageConfig,
    schedule: &NoiseSchedule,
    denoiser: &mut ToyDenoiser,
    data1: &FixedDataset,
    data2: &FixedDataset,
    rng: &mut impl Rng,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<TracePoint>, DiffusionError> {
    if stage2.iterations > 0 && stage2.learning_rate >= stage1.learning_rate {
        return Err(DiffusionError::LearningRateOrder {
            stage1: stage1.learning_rate,
            stage2: stage2.learning_rate,
        });
    }
    let mut trace = run_stage(stage1, schedule, denoiser, data1, rng)?;
    if let Some(dir) = checkpoint_dir {
        let ckpt = Checkpoint::of(stage1.name, stage1.iterations, denoiser);
        write_checkpoint(&ckpt, &dir.join(format!("{}.ckpt", stage1.name)))?;
    }
    if stage2.iterations > 0 {
        trace.extend(run_stage(stage2, schedule, denoiser, data2, rng)?);
    }
    if let Some(dir) = checkpoint_dir {
        let ckpt = Checkpoint::of(stage2.name, stage2.iterations, denoiser);
        write_checkpoint(&ckpt, &dir.join(format!("{}.ckpt", stage2.name)))?;
    }
    Ok(trace)
}

/// Checkpoint file: one JSON header line, then the parameter vector as
/// little-endian 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: StageName,
    pub iteration: usize,
    pub dim: usize,
    pub theta_len: usize,
    #[serde(skip)]
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn of(stage: StageName, iteration: usize, denoiser: &ToyDenoiser) -> Self {
        Checkpoint {
            stage,
            iteration,
            dim: denoiser.dim,
            theta_len: denoiser.params().len(),
            theta: denoiser.params().to_vec(),
        }
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), DiffusionError> {
    let err = |e: std::io::Error| DiffusionError::Checkpoint(e.to_string());
    let mut file = std::fs::File::create(path).map_err(err)?;
    writeln!(file, "{}", serde_json::to_string(ckpt).unwrap()).map_err(err)?;
    for v in &ckpt.theta {
        file.write_all(&v.to_le_bytes()).map_err(err)?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, DiffusionError> {
    let err = |e: std::io::Error| DiffusionError::Checkpoint(e.to_string());
    let mut file = std::fs::File::open(path).map_err(err)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(err)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DiffusionError::Checkpoint("missing header line".into()))?;
    let mut ckpt: Checkpoint = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
    let payload = &bytes[newline + 1..];
    if payload.len() != ckpt.theta_len * 8 {
        return Err(DiffusionError::Checkpoint(format!(
            "payload holds {} bytes, header promises {} parameters",
            payload.len(),
            ckpt.theta_len
        )));
    }
    ckpt.theta = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ckpt)
}

/// Loss trace as CSV: stage,iteration,loss.
pub fn write_trace_csv(trace: &[TracePoint], path: &Path) -> Result<(), DiffusionError> {
    let err = |e: std::io::Error| DiffusionError::Checkpoint(e.to_string());
    let mut file = std::fs::File::create(path).map_err(err)?;
    writeln!(file, "stage,iteration,loss").map_err(err)?;
    for p in trace {
        writeln!(file, "{},{},{}", p.stage, p.iteration, p.loss).map_err(err)?;
    }
    Ok(())
}
