use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::chat::{
    mock::{MockChatBackend, MockVisionBackend},
    ChatBackend, HttpChatBackend, HttpVisionBackend, InFlightLimiter, ResponseCache, RetryPolicy,
    VisionBackend,
};
use crate::corpus::{self, ClipManifest, ClipRecord, Split, Verdict};
use crate::diffusion::{
    self, build_schedule, patchify, FixedDataset, LatentVideo, ScheduleKind, StageName,
    TokenKind, TokenSequence, ToyDenoiser,
};
use crate::dynamics;
use crate::frames::{self, FrameSource, FrameStream};
use crate::privacy::{self, PrivacyError, PrivacyScanner, ScanVerdict};
use crate::refiner::{self, RefineError, Refiner};

use super::{PipelineConfig, PipelineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Curate,
    Refine,
    PrivacyScan,
    Preprocess,
    Split { allow_failed_scans: bool },
    TuneToy,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Curate => "curate",
            Stage::Refine => "refine",
            Stage::PrivacyScan => "privacy-scan",
            Stage::Preprocess => "preprocess",
            Stage::Split { .. } => "split",
            Stage::TuneToy => "tune-toy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct StageReport {
    pub stage: String,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
}

impl std::fmt::Display for StageReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: pass={} fail={} skip={}",
            self.stage, self.passed, self.failed, self.skipped
        )
    }
}

fn working_manifest(config: &PipelineConfig) -> Result<ClipManifest, PipelineError> {
    let path = config.working_manifest();
    if path.exists() {
        Ok(corpus::load_manifest(&path)?)
    } else {
        std::fs::create_dir_all(&config.paths.out_dir).map_err(|e| PipelineError::Io {
            path: config.paths.out_dir.display().to_string(),
            source: e,
        })?;
        let manifest = corpus::load_manifest(&config.paths.input_manifest)?;
        corpus::save_manifest(&manifest, &path)?;
        Ok(manifest)
    }
}

fn load_clip_frames(config: &PipelineConfig, clip_id: &str) -> Result<FrameStream, PipelineError> {
    let source = FrameSource::Raw {
        data: config.paths.frame_dir.join(format!("{clip_id}.rgb")),
        sidecar: config.paths.frame_dir.join(format!("{clip_id}.json")),
    };
    Ok(frames::ingest_frames(clip_id, &source)?)
}

fn curation_complete(manifest: &ClipManifest) -> bool {
    manifest.records.iter().all(|r| {
        r.verdicts.dynamics != Verdict::Unknown && r.verdicts.resolution != Verdict::Unknown
    })
}

fn refinement_complete(manifest: &ClipManifest) -> bool {
    manifest
        .records
        .iter()
        .filter(|r| r.passed_curation())
        .all(|r| r.instruction.is_some() || r.refine_failed == Some(true))
}

fn privacy_complete(manifest: &ClipManifest) -> bool {
    manifest
        .records
        .iter()
        .filter(|r| r.passed_curation() && r.instruction.is_some())
        .all(|r| r.verdicts.privacy != Verdict::Unknown || r.scan_failed == Some(true))
}

fn require(ok: bool, stage: &str, missing: &str) -> Result<(), PipelineError> {
    if ok {
        Ok(())
    } else {
        Err(PipelineError::MissingPrerequisite {
            stage: stage.to_string(),
            missing: missing.to_string(),
        })
    }
}

/// Run one pipeline stage. Stages skip records that already carry their
/// annotation, write the working manifest atomically, and leave it untouched
/// when nothing changed, so reruns are idempotent and an interrupted stage
/// can simply be restarted.
pub fn run_stage_cmd(stage: Stage, config: &PipelineConfig) -> Result<StageReport, PipelineError> {
    match stage {
        Stage::Curate => run_curate(config),
        Stage::Refine => run_refine(config),
        Stage::PrivacyScan => run_privacy_scan(config),
        Stage::Preprocess => run_preprocess(config),
        Stage::Split { allow_failed_scans } => run_split(config, allow_failed_scans),
        Stage::TuneToy => run_tune_toy(config),
    }
}

fn run_curate(config: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let mut manifest = working_manifest(config)?;
    let params = &config.detector;
    let mut report = StageReport {
        stage: "curate".into(),
        passed: 0,
        failed: 0,
        skipped: 0,
    };
    let mut changed = false;
    for record in &mut manifest.records {
        if record.verdicts.dynamics != Verdict::Unknown
            && record.verdicts.resolution != Verdict::Unknown
        {
            report.skipped += 1;
            continue;
        }
        let resolution_ok = dynamics::resolution_verdict(record.width, record.height, params);
        let stream = load_clip_frames(config, &record.clip_id)?;
        let keyframes = dynamics::detect_keyframes(&stream, params)?;
        let count = keyframes.len() as u64;
        let dynamics_ok = dynamics::dynamics_verdict(count, params);
        record.keyframe_count = Some(count);
        record.verdicts.dynamics = if dynamics_ok { Verdict::Pass } else { Verdict::Fail };
        record.verdicts.resolution = if resolution_ok { Verdict::Pass } else { Verdict::Fail };
        if dynamics_ok && resolution_ok {
            report.passed += 1;
        } else {
            report.failed += 1;
        }
        changed = true;
    }
    if changed {
        manifest.provenance.push(format!(
            "curate: pass={} fail={}",
            report.passed, report.failed
        ));
        corpus::save_manifest(&manifest, &config.working_manifest())?;
    }
    Ok(report)
}

fn build_refiner(config: &PipelineConfig, backend: Arc<dyn ChatBackend>) -> Result<Refiner, PipelineError> {
    let exemplars = refiner::load_exemplars(&config.refiner.exemplar_file)?;
    let cache = ResponseCache::new(config.paths.cache_dir.join("refine"))?;
    let retry = if config.refiner.mock {
        RetryPolicy::immediate(5)
    } else {
        RetryPolicy::default()
    };
    Ok(Refiner {
        backend,
        cache,
        exemplars,
        model: config.refiner.model.clone(),
        retry,
        blocklist: config.refiner.blocklist.clone(),
    })
}

pub fn chat_backend_for(config: &PipelineConfig) -> Result<Arc<dyn ChatBackend>, PipelineError> {
    if config.refiner.mock {
        Ok(Arc::new(MockChatBackend::default()))
    } else if let Some(endpoint) = &config.refiner.endpoint {
        let key = std::env::var(crate::chat::ENV_LLM_KEY).ok();
        Ok(Arc::new(HttpChatBackend::new(endpoint, key, &config.refiner.model)))
    } else {
        Ok(Arc::new(HttpChatBackend::from_env(&config.refiner.model)?))
    }
}

fn run_refine(config: &PipelineConfig) -> Result<StageReport, PipelineError> {
    run_refine_with(config, chat_backend_for(config)?)
}

/// Refinement with an explicit backend; bounded-parallel over clips with
/// results merged in manifest order so output is deterministic.
pub fn run_refine_with(
    config: &PipelineConfig,
    backend: Arc<dyn ChatBackend>,
) -> Result<StageReport, PipelineError> {
    let mut manifest = working_manifest(config)?;
    require(curation_complete(&manifest), "refine", "curate")?;
    let mut report = StageReport {
        stage: "refine".into(),
        passed: 0,
        failed: 0,
        skipped: 0,
    };
    let candidates: Vec<(String, String)> = manifest
        .records
        .iter()
        .filter(|r| r.passed_curation() && r.instruction.is_none() && r.refine_failed != Some(true))
        .map(|r| (r.clip_id.clone(), r.caption.clone()))
        .collect();
    report.skipped = manifest.records.len() - candidates.len();
    if candidates.is_empty() {
        return Ok(report);
    }

    let refiner = build_refiner(config, backend)?;
    let limiter = InFlightLimiter::new(config.refiner.in_flight);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(String, Result<String, RefineError>)>> = Mutex::new(Vec::new());
    let n_threads = config.refiner.in_flight.min(candidates.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..n_threads {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some((clip_id, caption)) = candidates.get(idx) else {
                    break;
                };
                let outcome = {
                    let _guard = limiter.acquire();
                    refiner
                        .refine_caption(clip_id, caption)
                        .map(|r| r.instruction)
                };
                results.lock().unwrap().push((clip_id.clone(), outcome));
            });
        }
    });

    let mut by_clip: std::collections::HashMap<String, Result<String, RefineError>> =
        results.into_inner().unwrap().into_iter().collect();
    for record in &mut manifest.records {
        let Some(outcome) = by_clip.remove(&record.clip_id) else {
            continue;
        };
        match outcome {
            Ok(instruction) => {
                record.instruction = Some(instruction);
                report.passed += 1;
            }
            Err(RefineError::RefineFailed { .. }) => {
                record.refine_failed = Some(true);
                report.failed += 1;
            }
            // Transport-level failure: abort without saving; the cache keeps
            // completed work so a restart converges to the same manifest.
            Err(e) => return Err(e.into()),
        }
    }
    manifest.provenance.push(format!(
        "refine: pass={} fail={}",
        report.passed, report.failed
    ));
    corpus::save_manifest(&manifest, &config.working_manifest())?;
    Ok(report)
}

pub fn vision_backend_for(config: &PipelineConfig) -> Result<Box<dyn VisionBackend>, PipelineError> {
    if config.privacy.mock {
        Ok(Box::new(MockVisionBackend::default()))
    } else if let Some(endpoint) = &config.privacy.endpoint {
        let key = std::env::var(crate::chat::ENV_VLM_KEY).ok();
        Ok(Box::new(HttpVisionBackend::new(endpoint, key, &config.privacy.model)))
    } else {
        Ok(Box::new(HttpVisionBackend::from_env(&config.privacy.model)?))
    }
}

fn run_privacy_scan(config: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let mut manifest = working_manifest(config)?;
    require(curation_complete(&manifest), "privacy-scan", "curate")?;
    require(refinement_complete(&manifest), "privacy-scan", "refine")?;
    let backend = vision_backend_for(config)?;
    let cache = ResponseCache::new(config.paths.cache_dir.join("privacy"))?;
    let scanner = PrivacyScanner {
        backend: backend.as_ref(),
        cache: Some(&cache),
        prompt: config.privacy.prompt.clone(),
        retry: if config.privacy.mock {
            RetryPolicy::immediate(5)
        } else {
            RetryPolicy::default()
        },
    };
    let mut report = StageReport {
        stage: "privacy-scan".into(),
        passed: 0,
        failed: 0,
        skipped: 0,
    };
    let mut changed = false;
    for record in &mut manifest.records {
        let scannable = record.passed_curation()
            && record.instruction.is_some()
            && record.verdicts.privacy == Verdict::Unknown
            && record.scan_failed != Some(true);
        if !scannable {
            report.skipped += 1;
            continue;
        }
        let stream = load_clip_frames(config, &record.clip_id)?;
        match scanner.classify_clip(&stream, record) {
            Ok(scan) => {
                record.verdicts.privacy = match scan.verdict {
                    ScanVerdict::Clean => Verdict::Pass,
                    ScanVerdict::Flagged => Verdict::Fail,
                };
                if scan.verdict == ScanVerdict::Clean {
                    report.passed += 1;
                } else {
                    report.failed += 1;
                }
            }
            Err(PrivacyError::Unparseable(_)) | Err(PrivacyError::Service(_)) => {
                record.scan_failed = Some(true);
                report.failed += 1;
            }
            Err(e) => return Err(e.into()),
        }
        changed = true;
    }
    if changed {
        manifest.provenance.push(format!(
            "privacy-scan: clean={} flagged_or_failed={}",
            report.passed, report.failed
        ));
        corpus::save_manifest(&manifest, &config.working_manifest())?;
    }
    Ok(report)
}

fn run_preprocess(config: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let manifest = working_manifest(config)?;
    require(curation_complete(&manifest), "preprocess", "curate")?;
    require(refinement_complete(&manifest), "preprocess", "refine")?;
    require(privacy_complete(&manifest), "preprocess", "privacy-scan")?;
    let out_dir = config.processed_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| PipelineError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut report = StageReport {
        stage: "preprocess".into(),
        passed: 0,
        failed: 0,
        skipped: 0,
    };
    for record in &manifest.records {
        if !record.passed_curation() {
            report.skipped += 1;
            continue;
        }
        let data_path = out_dir.join(format!("{}.rgb", record.clip_id));
        let sidecar_path = out_dir.join(format!("{}.json", record.clip_id));
        if data_path.exists() && sidecar_path.exists() {
            report.skipped += 1;
            continue;
        }
        let stream = load_clip_frames(config, &record.clip_id)?;
        let resized = frames::resize_clip(&stream, config.target_width, config.target_height)?;
        let sampled = frames::sample_to_49(&resized);
        frames::write_raw(&sampled, &data_path, &sidecar_path)?;
        report.passed += 1;
    }
    Ok(report)
}

fn run_split(config: &PipelineConfig, allow_failed_scans: bool) -> Result<StageReport, PipelineError> {
    let mut manifest = working_manifest(config)?;
    require(curation_complete(&manifest), "split", "curate")?;
    require(refinement_complete(&manifest), "split", "refine")?;
    require(privacy_complete(&manifest), "split", "privacy-scan")?;
    let mut report = StageReport {
        stage: "split".into(),
        passed: 0,
        failed: 0,
        skipped: 0,
    };
    let curated: Vec<ClipRecord> = manifest
        .records
        .iter()
        .filter(|r| r.passed_curation())
        .cloned()
        .collect();
    let already_split = curated.iter().all(|r| r.split.is_some());
    if !curated.is_empty() && !already_split {
        let curated_manifest = ClipManifest::new(curated);
        let split = corpus::split_manifest(
            &curated_manifest,
            config.split.train_fraction,
            config.seed,
            config.split.group_by_source,
        )?;
        let assignment: std::collections::HashMap<&str, Split> = split
            .records
            .iter()
            .map(|r| (r.clip_id.as_str(), r.split.unwrap()))
            .collect();
        for record in &mut manifest.records {
            if let Some(&s) = assignment.get(record.clip_id.as_str()) {
                record.split = Some(s);
                report.passed += 1;
            } else {
                report.skipped += 1;
            }
        }
        manifest.provenance.push(format!(
            "split: fraction={} seed={} group_by_source={}",
            config.split.train_fraction, config.seed, config.split.group_by_source
        ));
        corpus::save_manifest(&manifest, &config.working_manifest())?;
    } else {
        report.skipped = manifest.records.len();
    }
    // The privacy-preserved training subset follows directly from the split.
    let subset = privacy::build_privacy_subset(&manifest, allow_failed_scans)?;
    corpus::save_manifest(&subset, &config.privacy_subset_path())?;
    Ok(report)
}

/// Deterministic toy latents: a fixed-shape grid seeded from the clip id,
/// patchified at unit rates, standing in for the frozen VAE.
pub fn toy_latents(clip_id: &str, token_dim: usize) -> TokenSequence {
    let seed = u64::from_le_bytes(Sha256::digest(clip_id.as_bytes())[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let shape = (2, 2, 2, token_dim);
    let grid: Vec<f64> = (0..8 * token_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let video = LatentVideo::new(clip_id, shape, grid).unwrap();
    patchify(&video, 1, 1).unwrap()
}

/// Frozen text embedding: one fixed random token per instruction,
/// deterministic by instruction hash.
pub fn toy_text_embedding(instruction: &str, token_dim: usize) -> TokenSequence {
    let seed = u64::from_le_bytes(Sha256::digest(instruction.as_bytes())[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let token: Vec<f64> = (0..token_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TokenSequence::new(vec![token], token_dim, TokenKind::Text).unwrap()
}

fn dataset_from(records: &[&ClipRecord], token_dim: usize) -> FixedDataset {
    let items = records
        .iter()
        .map(|r| {
            (
                toy_latents(&r.clip_id, token_dim),
                toy_text_embedding(r.instruction.as_deref().unwrap_or(""), token_dim),
            )
        })
        .collect();
    FixedDataset { items }
}

fn run_tune_toy(config: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let manifest = working_manifest(config)?;
    let curated_split = manifest
        .records
        .iter()
        .filter(|r| r.passed_curation())
        .all(|r| r.split.is_some());
    require(
        curated_split && config.privacy_subset_path().exists(),
        "tune-toy",
        "split",
    )?;
    let ckpt1 = config
        .paths
        .out_dir
        .join(format!("{}.ckpt", StageName::TransferPretrain));
    let ckpt2 = config
        .paths
        .out_dir
        .join(format!("{}.ckpt", StageName::PrivacyFinetune));
    if ckpt1.exists() && ckpt2.exists() {
        return Ok(StageReport {
            stage: "tune-toy".into(),
            passed: 0,
            failed: 0,
            skipped: manifest.records.len(),
        });
    }
    let train_records: Vec<&ClipRecord> = manifest
        .records
        .iter()
        .filter(|r| r.passed_curation() && r.split == Some(Split::Train) && r.instruction.is_some())
        .collect();
    let subset_manifest = corpus::load_manifest(&config.privacy_subset_path())?;
    let subset_records: Vec<&ClipRecord> = subset_manifest.records.iter().collect();
    if train_records.is_empty() || subset_records.is_empty() {
        return Err(PipelineError::Invalid(
            "tune-toy needs non-empty train and privacy-subset sets".into(),
        ));
    }
    let token_dim = config.diffusion.token_dim;
    let data1 = dataset_from(&train_records, token_dim);
    let data2 = dataset_from(&subset_records, token_dim);
    let schedule = build_schedule(config.diffusion.total_steps, ScheduleKind::LinearBeta)?;
    let mut denoiser = ToyDenoiser::new(token_dim, config.diffusion.hidden, 8, config.seed);
    let stage1 = config.diffusion.stage1.to_stage_config(StageName::TransferPretrain);
    let stage2 = config.diffusion.stage2.to_stage_config(StageName::PrivacyFinetune);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let trace = diffusion::run_progressive(
        &stage1,
        &stage2,
        &schedule,
        &mut denoiser,
        &data1,
        &data2,
        &mut rng,
        Some(&config.paths.out_dir),
    )?;
    diffusion::write_trace_csv(&trace, &config.paths.out_dir.join("loss_trace.csv"))?;
    Ok(StageReport {
        stage: "tune-toy".into(),
        passed: train_records.len() + subset_records.len(),
        failed: 0,
        skipped: 0,
    })
}
