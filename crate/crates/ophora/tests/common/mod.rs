//! Shared fixture: a small synthetic corpus with dynamic, static, low-res
//! and privacy-flagged clips, scaled down so whole-pipeline tests stay fast.

// Each test binary uses a different subset of the fixture API.
#![allow(dead_code)]

use std::path::Path;

use ophora::chat::mock::OVERLAY_MARKER;
use ophora::corpus::{save_manifest, ClipManifest, ClipRecord};
use ophora::frames::{write_raw, Frame, FrameStream};
use ophora::pipeline::PipelineConfig;

pub const CLIP_W: u32 = 48;
pub const CLIP_H: u32 = 32;
pub const CLIP_FPS: f64 = 2.0;
pub const CLIP_FRAMES: usize = 8;

/// Alternating black/white frames: every consecutive pair scores 85 on the
/// content metric, well above the default threshold.
pub fn dynamic_frames(width: u32, height: u32) -> Vec<Frame> {
    (0..CLIP_FRAMES)
        .map(|i| {
            if i % 2 == 0 {
                Frame::filled(width, height, [0, 0, 0])
            } else {
                Frame::filled(width, height, [255, 255, 255])
            }
        })
        .collect()
}

pub fn static_frames(width: u32, height: u32) -> Vec<Frame> {
    (0..CLIP_FRAMES)
        .map(|_| Frame::filled(width, height, [90, 90, 90]))
        .collect()
}

pub struct ClipSpec {
    pub clip_id: String,
    pub source: String,
    pub caption: String,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Frame>,
}

pub fn default_clips() -> Vec<ClipSpec> {
    let mut clips = Vec::new();
    for i in 0..8 {
        clips.push(ClipSpec {
            clip_id: format!("clip{i:02}"),
            source: format!("s{}", i / 2),
            caption: format!(
                "Grasp the gallbladder neck with the forceps, step {i}. \
                 As you can see, the field is clear."
            ),
            width: CLIP_W,
            height: CLIP_H,
            frames: dynamic_frames(CLIP_W, CLIP_H),
        });
    }
    // Static clip: one keyframe only, fails dynamics.
    clips.push(ClipSpec {
        clip_id: "clip08".into(),
        source: "s4".into(),
        caption: "Hold the camera still over the liver bed.".into(),
        width: CLIP_W,
        height: CLIP_H,
        frames: static_frames(CLIP_W, CLIP_H),
    });
    // Low-resolution clip.
    clips.push(ClipSpec {
        clip_id: "clip09".into(),
        source: "s4".into(),
        caption: "Retract the fundus cephalad.".into(),
        width: 24,
        height: 16,
        frames: dynamic_frames(24, 16),
    });
    // Privacy-flagged clip: overlay marker on a frame the scanner samples.
    let mut flagged = dynamic_frames(CLIP_W, CLIP_H);
    flagged[4].set_pixel(1, 1, OVERLAY_MARKER);
    clips.push(ClipSpec {
        clip_id: "clip10".into(),
        source: "s5".into(),
        caption: "Clip the cystic duct twice proximally.".into(),
        width: CLIP_W,
        height: CLIP_H,
        frames: flagged,
    });
    clips.push(ClipSpec {
        clip_id: "clip11".into(),
        source: "s5".into(),
        caption: "Divide the cystic artery with scissors.".into(),
        width: CLIP_W,
        height: CLIP_H,
        frames: dynamic_frames(CLIP_W, CLIP_H),
    });
    clips
}

pub fn write_exemplars(path: &Path) {
    let exemplars = serde_json::json!([
        {
            "raw_caption": "Now we will divide the adhesions. As you can see, the plane is avascular.",
            "redundant_spans": ["As you can see, the plane is avascular."],
            "refined_instruction": "Divide the adhesions along the avascular plane."
        },
        {
            "raw_caption": "The surgeon grasps the infundibulum. Students should note the critical view.",
            "redundant_spans": ["Students should note the critical view."],
            "refined_instruction": "Grasp the infundibulum and expose the critical view."
        },
        {
            "raw_caption": "Irrigation of the gallbladder fossa is performed.",
            "redundant_spans": [],
            "refined_instruction": "Irrigate the gallbladder fossa."
        }
    ]);
    std::fs::write(path, serde_json::to_string_pretty(&exemplars).unwrap()).unwrap();
}

/// Builds the corpus on disk under `root` and returns a ready configuration.
pub fn build_corpus(root: &Path) -> PipelineConfig {
    build_corpus_with(root, &default_clips())
}

pub fn build_corpus_with(root: &Path, clips: &[ClipSpec]) -> PipelineConfig {
    let frame_dir = root.join("frames");
    let out_dir = root.join("out");
    let cache_dir = root.join("cache");
    std::fs::create_dir_all(&frame_dir).unwrap();
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::create_dir_all(&cache_dir).unwrap();

    let mut records = Vec::new();
    for spec in clips {
        let stream = FrameStream::new(
            &spec.clip_id,
            spec.width,
            spec.height,
            CLIP_FPS,
            spec.frames.clone(),
        )
        .unwrap();
        write_raw(
            &stream,
            &frame_dir.join(format!("{}.rgb", spec.clip_id)),
            &frame_dir.join(format!("{}.json", spec.clip_id)),
        )
        .unwrap();
        let mut record = ClipRecord::new(&spec.clip_id, &spec.source);
        record.width = spec.width;
        record.height = spec.height;
        record.fps = CLIP_FPS;
        record.duration_s = spec.frames.len() as f64 / CLIP_FPS;
        record.caption = spec.caption.clone();
        records.push(record);
    }
    let input_manifest = root.join("input.jsonl");
    save_manifest(&ClipManifest::new(records), &input_manifest).unwrap();

    let exemplar_file = root.join("exemplars.json");
    write_exemplars(&exemplar_file);

    let mut config: PipelineConfig = toml::from_str(&format!(
        r#"
seed = 7

[paths]
input_manifest = "{input}"
frame_dir = "{frames}"
cache_dir = "{cache}"
out_dir = "{out}"

[detector]
content_threshold = 27.0
min_gap_frames = 2
keyframe_upper = 100
keyframe_lower = 2
min_width = 48
min_height = 32

[refiner]
mock = true
exemplar_file = "{exemplars}"

[privacy]
mock = true

[diffusion]
total_steps = 20
token_dim = 4
hidden = 8

[diffusion.stage1]
learning_rate = 0.05
batch_size = 4
iterations = 30
num_workers = 2

[diffusion.stage2]
learning_rate = 0.02
batch_size = 4
iterations = 10
num_workers = 2
"#,
        input = input_manifest.display(),
        frames = frame_dir.display(),
        cache = cache_dir.display(),
        out = out_dir.display(),
        exemplars = exemplar_file.display(),
    ))
    .unwrap();
    config.target_width = 24;
    config.target_height = 16;
    config.validate().unwrap();
    config
}

/// Writes the configuration to a TOML file for CLI invocations.
pub fn write_config(config: &PipelineConfig, path: &Path) {
    std::fs::write(path, toml::to_string(config).unwrap()).unwrap();
}
