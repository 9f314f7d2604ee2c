//! Canonical data model and manifest persistence.
//!
//! A manifest is a JSONL file, one clip record per line, optionally preceded
//! by a header object carrying `schema_version` and the stage provenance log.
//! Manifests are append/annotate-only: a stage may fill in verdicts or the
//! instruction, never rewrite earlier fields.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("duplicate clip_id {clip_id:?} on lines {first} and {second}")]
    DuplicateClipId {
        clip_id: String,
        first: usize,
        second: usize,
    },
    #[error("invalid record {clip_id:?} on line {line}: {message}")]
    InvalidRecord {
        clip_id: String,
        line: usize,
        message: String,
    },
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("split requires at least 2 units, got {0}")]
    TooFewUnits(usize),
    #[error("train_fraction must be in (0,1), got {0}")]
    BadFraction(f64),
    #[error("record {0:?} has not passed curation; split applies to curated records only")]
    NotCurated(String),
}

/// Tri-state outcome of a filtering stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    #[default]
    Unknown,
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Verdicts {
    pub dynamics: Verdict,
    pub resolution: Verdict,
    pub privacy: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One clip/caption pair and everything the pipeline learns about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub source_video_id: String,
    pub duration_s: f64,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyframe_count: Option<u64>,
    #[serde(default)]
    pub verdicts: Verdicts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_failed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_failed: Option<bool>,
    /// Unknown keys from the input file, preserved on round-trip.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ClipRecord {
    pub fn new(clip_id: &str, source_video_id: &str) -> Self {
        ClipRecord {
            clip_id: clip_id.to_string(),
            source_video_id: source_video_id.to_string(),
            duration_s: 1.0,
            width: 720,
            height: 480,
            fps: 30.0,
            caption: String::new(),
            instruction: None,
            keyframe_count: None,
            verdicts: Verdicts::default(),
            split: None,
            refine_failed: None,
            scan_failed: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.clip_id.is_empty() {
            return Err("clip_id is empty".into());
        }
        if !(self.duration_s > 0.0) {
            return Err(format!("duration_s must be > 0, got {}", self.duration_s));
        }
        if !(self.fps > 0.0) {
            return Err(format!("fps must be > 0, got {}", self.fps));
        }
        if let Some(instr) = &self.instruction {
            if instr.trim().is_empty() {
                return Err("instruction present but empty after trim".into());
            }
        }
        if self.verdicts.privacy == Verdict::Pass
            && (self.verdicts.dynamics != Verdict::Pass
                || self.verdicts.resolution != Verdict::Pass)
        {
            return Err("privacy pass requires dynamics and resolution pass".into());
        }
        Ok(())
    }

    pub fn passed_curation(&self) -> bool {
        self.verdicts.dynamics == Verdict::Pass && self.verdicts.resolution == Verdict::Pass
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    #[serde(default)]
    provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClipManifest {
    pub records: Vec<ClipRecord>,
    pub schema_version: u32,
    pub provenance: Vec<String>,
}

impl ClipManifest {
    pub fn new(records: Vec<ClipRecord>) -> Self {
        ClipManifest {
            records,
            schema_version: SCHEMA_VERSION,
            provenance: Vec::new(),
        }
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.records.iter().find(|r| r.clip_id == clip_id)
    }
}

pub fn load_manifest(path: &Path) -> Result<ClipManifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<ClipManifest, ManifestError> {
    let mut manifest = ClipManifest::new(Vec::new());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        // A header line is recognized by its schema_version key.
        if manifest.records.is_empty() && seen.is_empty() && line.contains("schema_version") {
            if let Ok(header) = serde_json::from_str::<ManifestHeader>(line) {
                if header.schema_version != SCHEMA_VERSION {
                    return Err(ManifestError::SchemaVersion {
                        found: header.schema_version,
                        expected: SCHEMA_VERSION,
                    });
                }
                manifest.provenance = header.provenance;
                continue;
            }
        }
        let record: ClipRecord =
            serde_json::from_str(line).map_err(|e| ManifestError::MalformedLine {
                line: lineno,
                message: e.to_string(),
            })?;
        record
            .validate()
            .map_err(|message| ManifestError::InvalidRecord {
                clip_id: record.clip_id.clone(),
                line: lineno,
                message,
            })?;
        if let Some(&first) = seen.get(&record.clip_id) {
            return Err(ManifestError::DuplicateClipId {
                clip_id: record.clip_id,
                first,
                second: lineno,
            });
        }
        seen.insert(record.clip_id.clone(), lineno);
        manifest.records.push(record);
    }
    Ok(manifest)
}

/// Atomic write: serialize to a temp file in the target directory, then rename.
pub fn save_manifest(manifest: &ClipManifest, path: &Path) -> Result<(), ManifestError> {
    let io_err = |e: std::io::Error| ManifestError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    let header = ManifestHeader {
        schema_version: manifest.schema_version,
        provenance: manifest.provenance.clone(),
    };
    writeln!(tmp, "{}", serde_json::to_string(&header).unwrap()).map_err(io_err)?;
    for record in &manifest.records {
        writeln!(tmp, "{}", serde_json::to_string(record).unwrap()).map_err(io_err)?;
    }
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Deterministic train/test split.
///
/// Units are either whole source videos (`group_by_source`, the default in the
/// pipeline, so clips of one surgery never straddle the split) or individual
/// clips. Units are sorted by id and shuffled with a seeded Fisher-Yates, so
/// the assignment is platform-independent. Train count is
/// `floor(train_fraction * unit_count)`.
pub fn split_manifest(
    manifest: &ClipManifest,
    train_fraction: f64,
    seed: u64,
    group_by_source: bool,
) -> Result<ClipManifest, ManifestError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ManifestError::BadFraction(train_fraction));
    }
    for record in &manifest.records {
        if !record.passed_curation() {
            return Err(ManifestError::NotCurated(record.clip_id.clone()));
        }
    }
    let mut units: Vec<String> = if group_by_source {
        let mut sources: Vec<String> = manifest
            .records
            .iter()
            .map(|r| r.source_video_id.clone())
            .collect();
        sources.sort();
        sources.dedup();
        sources
    } else {
        let mut ids: Vec<String> = manifest.records.iter().map(|r| r.clip_id.clone()).collect();
        ids.sort();
        ids
    };
    if units.len() < 2 {
        return Err(ManifestError::TooFewUnits(units.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);
    // The small bias guard keeps exact products like 0.8 * 162185 from
    // landing a hair below their integer value in f64.
    let train_count = (train_fraction * units.len() as f64 + 1e-9).floor() as usize;
    let train_units: std::collections::HashSet<&String> = units[..train_count].iter().collect();

    let mut out = manifest.clone();
    for record in &mut out.records {
        let unit = if group_by_source {
            &record.source_video_id
        } else {
            &record.clip_id
        };
        record.split = Some(if train_units.contains(unit) {
            Split::Train
        } else {
            Split::Test
        });
    }
    out.provenance.push(format!(
        "split: fraction={train_fraction} seed={seed} group_by_source={group_by_source} train_units={train_count}/{}",
        units.len()
    ));
    Ok(out)
}
