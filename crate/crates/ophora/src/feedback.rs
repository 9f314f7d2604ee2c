//! Rater-feedback ingestion and aggregation: seven fixed criteria scored 0-3
//! per synthesized video, mapped to realism bands and averaged per
//! criterion, per surgical phase, or both.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FeedbackError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error: {0}")]
    Csv(String),
    #[error("row {row}: unknown criterion {name:?}")]
    UnknownCriterion { row: usize, name: String },
    #[error("row {row}: score {score} outside 0..3")]
    ScoreOutOfRange { row: usize, score: i64 },
    #[error("duplicate (video_id, rater_id, criterion) key on rows {first} and {second}")]
    Duplicate { first: usize, second: usize },
    #[error("score {0} has no realism band")]
    NoBand(i64),
    #[error("no records to aggregate")]
    Empty,
}

/// The seven evaluation criteria, in their fixed reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Criterion {
    PhaseMatching,
    PhaseCompleteness,
    ConstructionRealism,
    ConstructionStability,
    ActionRealism,
    ActionLogic,
    ActionEffectiveness,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::PhaseMatching,
        Criterion::PhaseCompleteness,
        Criterion::ConstructionRealism,
        Criterion::ConstructionStability,
        Criterion::ActionRealism,
        Criterion::ActionLogic,
        Criterion::ActionEffectiveness,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::PhaseMatching => "PhaseMatching",
            Criterion::PhaseCompleteness => "PhaseCompleteness",
            Criterion::ConstructionRealism => "ConstructionRealism",
            Criterion::ConstructionStability => "ConstructionStability",
            Criterion::ActionRealism => "ActionRealism",
            Criterion::ActionLogic => "ActionLogic",
            Criterion::ActionEffectiveness => "ActionEffectiveness",
        }
    }

    /// Case-, space- and separator-insensitive lookup, absorbing spreadsheet
    /// variance like "phase matching" or "Phase_Matching".
    pub fn parse(name: &str) -> Option<Criterion> {
        let normalized: String = name
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        Criterion::ALL
            .into_iter()
            .find(|c| c.name().to_lowercase() == normalized)
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub phase_label: String,
    pub rater_id: String,
    pub criterion: Criterion,
    pub score: u8,
}

/// Realism percentage band for one score value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealismBand {
    pub low_pct: u8,
    pub high_pct: u8,
}

/// Score-to-band table: 0 -> 0..10%, 1 -> 10..50%, 2 -> 50..90%, 3 -> 90..100%.
pub fn band_of(score: i64) -> Result<RealismBand, FeedbackError> {
    match score {
        0 => Ok(RealismBand { low_pct: 0, high_pct: 10 }),
        1 => Ok(RealismBand { low_pct: 10, high_pct: 50 }),
        2 => Ok(RealismBand { low_pct: 50, high_pct: 90 }),
        3 => Ok(RealismBand { low_pct: 90, high_pct: 100 }),
        other => Err(FeedbackError::NoBand(other)),
    }
}

/// Parse the score CSV (`video_id,phase_label,rater_id,criterion,score`),
/// validating criterion names, the 0..3 range, and key uniqueness.
pub fn parse_scores(path: &Path) -> Result<Vec<ScoreRecord>, FeedbackError> {
    let text = std::fs::read_to_string(path).map_err(|e| FeedbackError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_scores_text(&text)
}

pub fn parse_scores_text(text: &str) -> Result<Vec<ScoreRecord>, FeedbackError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut seen: BTreeMap<(String, String, Criterion), usize> = BTreeMap::new();
    for (idx, row) in reader.records().enumerate() {
        let row_number = idx + 2; // 1-based, after the header
        let row = row.map_err(|e| FeedbackError::Csv(e.to_string()))?;
        if row.len() != 5 {
            return Err(FeedbackError::Csv(format!(
                "row {row_number}: expected 5 fields, got {}",
                row.len()
            )));
        }
        let criterion = Criterion::parse(&row[3]).ok_or_else(|| FeedbackError::UnknownCriterion {
            row: row_number,
            name: row[3].to_string(),
        })?;
        let score: i64 = row[4]
            .parse()
            .map_err(|_| FeedbackError::Csv(format!("row {row_number}: score {:?} not an integer", &row[4])))?;
        if !(0..=3).contains(&score) {
            return Err(FeedbackError::ScoreOutOfRange { row: row_number, score });
        }
        let key = (row[0].to_string(), row[2].to_string(), criterion);
        if let Some(&first) = seen.get(&key) {
            return Err(FeedbackError::Duplicate { first, second: row_number });
        }
        seen.insert(key, row_number);
        records.push(ScoreRecord {
            video_id: row[0].to_string(),
            phase_label: row[1].to_string(),
            rater_id: row[2].to_string(),
            criterion,
            score: score as u8,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Criterion,
    Phase,
    CriterionPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group: String,
    pub mean: f64,
    pub count: usize,
    /// max - min of the per-rater mean scores within the group.
    pub rater_spread: f64,
}

fn group_key(record: &ScoreRecord, group_by: GroupBy) -> String {
    match group_by {
        GroupBy::Criterion => record.criterion.name().to_string(),
        GroupBy::Phase => record.phase_label.clone(),
        GroupBy::CriterionPhase => format!("{}/{}", record.criterion.name(), record.phase_label),
    }
}

/// Arithmetic mean, count and rater spread per group, ordered by group key.
/// Criterion groups keep the fixed criterion order.
pub fn aggregate(records: &[ScoreRecord], group_by: GroupBy) -> Result<Vec<GroupStat>, FeedbackError> {
    if records.is_empty() {
        return Err(FeedbackError::Empty);
    }
    let mut groups: BTreeMap<String, Vec<&ScoreRecord>> = BTreeMap::new();
    for record in records {
        groups.entry(group_key(record, group_by)).or_default().push(record);
    }
    let mut stats: Vec<GroupStat> = groups
        .into_iter()
        .map(|(group, members)| {
            let count = members.len();
            let mean = members.iter().map(|r| r.score as f64).sum::<f64>() / count as f64;
            let mut per_rater: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for r in &members {
                let entry = per_rater.entry(&r.rater_id).or_insert((0.0, 0));
                entry.0 += r.score as f64;
                entry.1 += 1;
            }
            let rater_means: Vec<f64> =
                per_rater.values().map(|(sum, n)| sum / *n as f64).collect();
            let spread = rater_means.iter().cloned().fold(f64::MIN, f64::max)
                - rater_means.iter().cloned().fold(f64::MAX, f64::min);
            GroupStat {
                group,
                mean,
                count,
                rater_spread: spread,
            }
        })
        .collect();
    if group_by == GroupBy::Criterion {
        stats.sort_by_key(|s| {
            Criterion::ALL
                .iter()
                .position(|c| c.name() == s.group)
                .unwrap_or(usize::MAX)
        });
    }
    Ok(stats)
}

/// Radar export: one `{axis, value}` entry per group, values being the
/// aggregate means, suitable for external plotting.
pub fn export_radar(stats: &[GroupStat]) -> String {
    let axes: Vec<serde_json::Value> = stats
        .iter()
        .map(|s| serde_json::json!({"axis": s.group, "value": s.mean}))
        .collect();
    serde_json::to_string_pretty(&axes).unwrap()
}

pub fn parse_radar(text: &str) -> Result<Vec<(String, f64)>, FeedbackError> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| FeedbackError::Csv(e.to_string()))?;
    values
        .into_iter()
        .map(|v| {
            let axis = v["axis"]
                .as_str()
                .ok_or_else(|| FeedbackError::Csv("missing axis".into()))?
                .to_string();
            let value = v["value"]
                .as_f64()
                .ok_or_else(|| FeedbackError::Csv("missing value".into()))?;
            Ok((axis, value))
        })
        .collect()
}
