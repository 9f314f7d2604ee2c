//! Privacy screening: frames are sampled at 1 FPS (inclusive of the first
//! and last instants), each sampled frame is shown to a vision-language
//! service with a fixed yes/no question about subtitles, watermarks and
//! identifying overlays, and a clip is excluded as soon as any frame is
//! flagged.

use serde::{Deserialize, Serialize};

use crate::chat::{self, ChatError, ResponseCache, RetryPolicy, VisionBackend};
use crate::corpus::{ClipManifest, ClipRecord, Split, Verdict};
use crate::frames::{Frame, FrameStream};

pub const DEFAULT_PROMPT: &str = "Does this surgical video frame contain any subtitles, captions, \
watermarks, logos, or text overlays that could identify a person or institution? Answer Yes or No.";

#[derive(Debug, thiserror::Error)]
pub enum PrivacyError {
    #[error("duration must be > 0, got {0}")]
    NonPositiveDuration(f64),
    #[error("service answer unparseable as yes/no after retry: {0:?}")]
    Unparseable(String),
    #[error(transparent)]
    Service(#[from] ChatError),
    #[error("clip {0} has not passed curation; privacy screening runs on curated clips only")]
    NotCurated(String),
    #[error("{failed} record(s) have failed scans; pass allow_failed to finalize anyway")]
    FailedScansPresent { failed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScanVerdict {
    Clean,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyScan {
    pub clip_id: String,
    pub sampled_times_s: Vec<f64>,
    pub frame_flags: Vec<bool>,
    pub verdict: ScanVerdict,
}

/// 1 FPS sampling grid between the first and last instants of the clip:
/// every whole second plus the exact end time, sorted and deduplicated.
pub fn sample_timestamps(duration_s: f64) -> Result<Vec<f64>, PrivacyError> {
    if !(duration_s > 0.0) {
        return Err(PrivacyError::NonPositiveDuration(duration_s));
    }
    let mut times: Vec<f64> = (0..=duration_s.floor() as u64).map(|s| s as f64).collect();
    if *times.last().unwrap() != duration_s {
        times.push(duration_s);
    }
    Ok(times)
}

fn parse_yes_no(answer: &str) -> Option<bool> {
    let lower = answer.trim().to_lowercase();
    if lower.starts_with("yes") {
        Some(true)
    } else if lower.starts_with("no") {
        Some(false)
    } else {
        None
    }
}

pub struct PrivacyScanner<'a> {
    pub backend: &'a dyn VisionBackend,
    pub cache: Option<&'a ResponseCache>,
    pub prompt: String,
    pub retry: RetryPolicy,
}

impl<'a> PrivacyScanner<'a> {
    pub fn new(backend: &'a dyn VisionBackend) -> Self {
        PrivacyScanner {
            backend,
            cache: None,
            prompt: DEFAULT_PROMPT.to_string(),
            retry: RetryPolicy::default(),
        }
    }

    /// Ask the service whether one frame carries sensitive content. The
    /// answer must match a strict yes/no grammar; an unparseable answer is
    /// re-asked once before erroring.
    pub fn detect_sensitive(&self, frame: &Frame) -> Result<bool, PrivacyError> {
        let key = {
            let mut material = frame.data.clone();
            material.extend_from_slice(self.prompt.as_bytes());
            chat::sha256_hex(&material)
        };
        if let Some(cache) = self.cache {
            if let Some(hit) = cache.get(&key) {
                if let Some(flag) = parse_yes_no(&hit) {
                    return Ok(flag);
                }
            }
        }
        let mut last_answer = String::new();
        for _ in 0..2 {
            let answer = chat::with_retry(&self.retry, || {
                self.backend.ask_about_frame(frame, &self.prompt)
            })?;
            if let Some(flag) = parse_yes_no(&answer) {
                if let Some(cache) = self.cache {
                    cache.put(&key, &answer)?;
                }
                return Ok(flag);
            }
            last_answer = answer;
        }
        Err(PrivacyError::Unparseable(last_answer))
    }

    /// Scan one curated clip. Sampled timestamps map to the nearest frame
    /// index (`round(t * fps)`, clamped, deduplicated) and the scan stops at
    /// the first flagged frame.
    pub fn classify_clip(&self, stream: &FrameStream, meta: &ClipRecord) -> Result<PrivacyScan, PrivacyError> {
        if !meta.passed_curation() {
            return Err(PrivacyError::NotCurated(meta.clip_id.clone()));
        }
        let times = sample_timestamps(meta.duration_s)?;
        let mut seen_indices = Vec::new();
        let mut sampled_times = Vec::new();
        let mut flags = Vec::new();
        for t in times {
            let idx = ((t * stream.fps).round() as usize).min(stream.frames.len() - 1);
            if seen_indices.contains(&idx) {
                continue;
            }
            seen_indices.push(idx);
            let flag = self.detect_sensitive(&stream.frames[idx])?;
            sampled_times.push(t);
            flags.push(flag);
            if flag {
                break;
            }
        }
        let verdict = if flags.iter().any(|&f| f) {
            ScanVerdict::Flagged
        } else {
            ScanVerdict::Clean
        };
        Ok(PrivacyScan {
            clip_id: meta.clip_id.clone(),
            sampled_times_s: sampled_times,
            frame_flags: flags,
            verdict,
        })
    }
}

/// Privacy-preserved training subset: the clean, train-split records.
/// Refuses to finalize while any record carries a failed scan unless
/// explicitly overridden.
pub fn build_privacy_subset(manifest: &ClipManifest, allow_failed: bool) -> Result<ClipManifest, PrivacyError> {
    let failed = manifest
        .records
        .iter()
        .filter(|r| r.scan_failed == Some(true))
        .count();
    if failed > 0 && !allow_failed {
        return Err(PrivacyError::FailedScansPresent { failed });
    }
    let records: Vec<ClipRecord> = manifest
        .records
        .iter()
        .filter(|r| r.verdicts.privacy == Verdict::Pass && r.split == Some(Split::Train))
        .cloned()
        .collect();
    let mut out = ClipManifest::new(records);
    out.provenance = manifest.provenance.clone();
    out.provenance.push(format!(
        "privacy_subset: kept {} of {} records",
        out.records.len(),
        manifest.records.len()
    ));
    Ok(out)
}
