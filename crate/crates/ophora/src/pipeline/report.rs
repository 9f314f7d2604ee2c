use serde::{Deserialize, Serialize};

use crate::corpus::{ClipManifest, Split, Verdict};

/// Corpus-level counts derived from a working manifest. JSON and text
/// renderings carry the same numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub total_clips: usize,
    pub dynamics_pass: usize,
    pub dynamics_fail: usize,
    pub resolution_pass: usize,
    pub resolution_fail: usize,
    pub curation_pass: usize,
    pub refined: usize,
    pub refine_failed: usize,
    pub privacy_pass: usize,
    pub privacy_fail: usize,
    pub scan_failed: usize,
    pub train: usize,
    pub eval: usize,
    pub privacy_subset: usize,
    /// Mean clip duration in seconds over all records, 0.0 when empty.
    pub mean_duration_seconds: f64,
}

pub fn build_report(manifest: &ClipManifest, privacy_subset: Option<&ClipManifest>) -> CorpusReport {
    let records = &manifest.records;
    let count = |f: &dyn Fn(&crate::corpus::ClipRecord) -> bool| records.iter().filter(|r| f(r)).count();
    let total = records.len();
    let mean_duration = if total == 0 {
        0.0
    } else {
        records.iter().map(|r| r.duration_s).sum::<f64>() / total as f64
    };
    CorpusReport {
        total_clips: total,
        dynamics_pass: count(&|r| r.verdicts.dynamics == Verdict::Pass),
        dynamics_fail: count(&|r| r.verdicts.dynamics == Verdict::Fail),
        resolution_pass: count(&|r| r.verdicts.resolution == Verdict::Pass),
        resolution_fail: count(&|r| r.verdicts.resolution == Verdict::Fail),
        curation_pass: count(&|r| r.passed_curation()),
        refined: count(&|r| r.instruction.is_some()),
        refine_failed: count(&|r| r.refine_failed == Some(true)),
        privacy_pass: count(&|r| r.verdicts.privacy == Verdict::Pass),
        privacy_fail: count(&|r| r.verdicts.privacy == Verdict::Fail),
        scan_failed: count(&|r| r.scan_failed == Some(true)),
        train: count(&|r| r.split == Some(Split::Train)),
        eval: count(&|r| r.split == Some(Split::Test)),
        privacy_subset: privacy_subset.map_or(0, |m| m.records.len()),
        mean_duration_seconds: mean_duration,
    }
}

pub fn render_report_text(report: &CorpusReport) -> String {
    format!(
        "clips: {}\n\
         dynamics: pass={} fail={}\n\
         resolution: pass={} fail={}\n\
         curation pass: {}\n\
         refined: {} (failed: {})\n\
         privacy: pass={} fail={} scan_failed={}\n\
         split: train={} eval={}\n\
         privacy subset: {}\n\
         mean duration: {:.2} s\n",
        report.total_clips,
        report.dynamics_pass,
        report.dynamics_fail,
        report.resolution_pass,
        report.resolution_fail,
        report.curation_pass,
        report.refined,
        report.refine_failed,
        report.privacy_pass,
        report.privacy_fail,
        report.scan_failed,
        report.train,
        report.eval,
        report.privacy_subset,
        report.mean_duration_seconds,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClipRecord, Verdicts};

    fn record(id: &str, dynamics: Verdict, privacy: Verdict, split: Option<Split>) -> ClipRecord {
        ClipRecord {
            clip_id: id.into(),
            source_video_id: format!("src/{id}"),
            caption: "cap".into(),
            duration_s: 4.0,
            fps: 1.0,
            width: 720,
            height: 480,
            verdicts: Verdicts {
                dynamics,
                resolution: dynamics,
                privacy,
            },
            instruction: Some("Grasp the tissue.".into()),
            keyframe_count: Some(3),
            split,
            refine_failed: None,
            scan_failed: None,
            extra: Default::default(),
        }
    }

    #[test]
    fn counts_partition_cleanly() {
        let manifest = ClipManifest::new(vec![
            record("a", Verdict::Pass, Verdict::Pass, Some(Split::Train)),
            record("b", Verdict::Pass, Verdict::Fail, Some(Split::Test)),
            record("c", Verdict::Fail, Verdict::Unknown, None),
        ]);
        let subset = ClipManifest::new(vec![record(
            "a",
            Verdict::Pass,
            Verdict::Pass,
            Some(Split::Train),
        )]);
        let report = build_report(&manifest, Some(&subset));
        assert_eq!(report.total_clips, 3);
        assert_eq!(report.curation_pass, 2);
        assert_eq!(report.privacy_pass, 1);
        assert_eq!(report.privacy_fail, 1);
        assert_eq!(report.train, 1);
        assert_eq!(report.eval, 1);
        assert_eq!(report.privacy_subset, 1);
        assert!((report.mean_duration_seconds - 4.0).abs() < 1e-12);
    }

    #[test]
    fn json_and_text_agree() {
        let manifest = ClipManifest::new(vec![record(
            "a",
            Verdict::Pass,
            Verdict::Pass,
            Some(Split::Train),
        )]);
        let report = build_report(&manifest, None);
        let json: CorpusReport =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(json, report);
        let text = render_report_text(&report);
        assert!(text.contains("clips: 1"));
        assert!(text.contains("train=1"));
    }
}
