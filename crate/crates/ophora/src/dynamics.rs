//! Dynamics-based filtering: keyframes are detected wherever the mean
//! absolute HSV delta between consecutive frames exceeds a content threshold,
//! and a clip passes when its keyframe count lies between the configured
//! lower and upper bounds. The resolution gate lives here too.

use crate::frames::{Frame, FrameError, FrameStream};

/// Detector defaults mirror the common content-detector settings: threshold
/// 27 on a 0..255 score, minimum 15 frames between keyframes, and the 2..100
/// keyframe-count acceptance band over clips of at least 720x480.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DetectorParams {
    pub content_threshold: f64,
    pub min_gap_frames: usize,
    pub keyframe_upper: u64,
    pub keyframe_lower: u64,
    pub min_width: u32,
    pub min_height: u32,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            content_threshold: 27.0,
            min_gap_frames: 15,
            keyframe_upper: 100,
            keyframe_lower: 2,
            min_width: 720,
            min_height: 480,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.keyframe_lower > self.keyframe_upper {
            return Err(format!(
                "keyframe_lower {} > keyframe_upper {}",
                self.keyframe_lower, self.keyframe_upper
            ));
        }
        if !(0.0..=255.0).contains(&self.content_threshold) {
            return Err(format!("content_threshold {} outside [0,255]", self.content_threshold));
        }
        if self.min_gap_frames < 1 {
            return Err("min_gap_frames must be >= 1".into());
        }
        Ok(())
    }
}

/// 8-bit HSV with H in [0,180), matching the usual 8-bit OpenCV convention.
pub fn rgb_to_hsv8(rgb: [u8; 3]) -> [u8; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    let s = if max == 0 {
        0
    } else {
        ((255.0 * (max - min) as f64 / max as f64) + 0.5) as u8
    };
    let h = if max == min {
        0.0
    } else {
        let delta = (max - min) as f64;
        let deg = if max == r {
            60.0 * (((g as f64 - b as f64) / delta) % 6.0)
        } else if max == g {
            60.0 * ((b as f64 - r as f64) / delta + 2.0)
        } else {
            60.0 * ((r as f64 - g as f64) / delta + 4.0)
        };
        if deg < 0.0 {
            deg + 360.0
        } else {
            deg
        }
    };
    let h8 = ((h / 2.0) + 0.5) as u16 % 180;
    [h8 as u8, s, v]
}

/// Mean over pixels of the mean absolute per-channel HSV difference.
/// Identical frames score 0; black against white scores 255/3.
pub fn content_score(a: &Frame, b: &Frame) -> Result<f64, FrameError> {
    if a.width != b.width || a.height != b.height {
        return Err(FrameError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let pixels = (a.width as usize) * (a.height as usize);
    let mut total = 0.0f64;
    for i in 0..pixels {
        let pa = rgb_to_hsv8([a.data[3 * i], a.data[3 * i + 1], a.data[3 * i + 2]]);
        let pb = rgb_to_hsv8([b.data[3 * i], b.data[3 * i + 1], b.data[3 * i + 2]]);
        let mut d = 0.0;
        for c in 0..3 {
            d += (pa[c] as f64 - pb[c] as f64).abs();
        }
        total += d / 3.0;
    }
    Ok(total / pixels as f64)
}

/// Frame 0 is always a keyframe; frame i > 0 is one when the content score
/// against frame i-1 exceeds the threshold and at least `min_gap_frames`
/// frames passed since the previous keyframe.
pub fn detect_keyframes(stream: &FrameStream, params: &DetectorParams) -> Result<Vec<usize>, FrameError> {
    let mut keyframes = vec![0usize];
    let mut prev_kf = 0usize;
    for i in 1..stream.frames.len() {
        let score = content_score(&stream.frames[i - 1], &stream.frames[i])?;
        if score > params.content_threshold && i - prev_kf >= params.min_gap_frames {
            keyframes.push(i);
            prev_kf = i;
        }
    }
    Ok(keyframes)
}

/// Pass iff keyframe_lower <= count <= keyframe_upper, both ends inclusive.
pub fn dynamics_verdict(keyframe_count: u64, params: &DetectorParams) -> bool {
    params.keyframe_lower <= keyframe_count && keyframe_count <= params.keyframe_upper
}

/// Pass iff both dimensions meet the minimum; exactly 720x480 passes.
pub fn resolution_verdict(width: u32, height: u32, params: &DetectorParams) -> bool {
    width >= params.min_width && height >= params.min_height
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::FrameStream;
    use proptest::prelude::*;

    fn stream_of(frames: Vec<Frame>) -> FrameStream {
        let (w, h) = (frames[0].width, frames[0].height);
        FrameStream::new("t", w, h, 30.0, frames).unwrap()
    }

    #[test]
    fn identical_frames_score_zero() {
        let f = Frame::filled(4, 4, [120, 30, 200]);
        assert_eq!(content_score(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn black_vs_white_scores_85() {
        let black = Frame::filled(4, 4, [0, 0, 0]);
        let white = Frame::filled(4, 4, [255, 255, 255]);
        assert_eq!(content_score(&black, &white).unwrap(), 85.0);
    }

    #[test]
    fn value_only_delta_of_30_scores_10() {
        let a = Frame::filled(4, 4, [100, 100, 100]);
        let b = Frame::filled(4, 4, [130, 130, 130]);
        assert_eq!(content_score(&a, &b).unwrap(), 10.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = Frame::zero(2, 2);
        let b = Frame::zero(3, 2);
        assert!(content_score(&a, &b).is_err());
    }

    #[test]
    fn constant_clip_has_single_keyframe() {
        let frames = vec![Frame::filled(2, 2, [50, 50, 50]); 100];
        let kf = detect_keyframes(&stream_of(frames), &DetectorParams::default()).unwrap();
        assert_eq!(kf, vec![0]);
    }

    #[test]
    fn strobing_clip_keyframes_every_frame() {
        let frames: Vec<Frame> = (0..150)
            .map(|i| {
                if i % 2 == 0 {
                    Frame::filled(2, 2, [0, 0, 0])
                } else {
                    Frame::filled(2, 2, [255, 255, 255])
                }
            })
            .collect();
        let params = DetectorParams {
            min_gap_frames: 1,
            ..DetectorParams::default()
        };
        let kf = detect_keyframes(&stream_of(frames), &params).unwrap();
        assert_eq!(kf.len(), 150);
    }

    #[test]
    fn single_hard_cut_detected() {
        let mut frames = vec![Frame::filled(2, 2, [10, 10, 10]); 40];
        frames.extend(vec![Frame::filled(2, 2, [240, 240, 240]); 40]);
        let kf = detect_keyframes(&stream_of(frames), &DetectorParams::default()).unwrap();
        assert_eq!(kf, vec![0, 40]);
    }

    #[test]
    fn dynamics_thresholds_inclusive() {
        let p = DetectorParams::default();
        assert!(!dynamics_verdict(1, &p));
        assert!(dynamics_verdict(2, &p));
        assert!(dynamics_verdict(50, &p));
        assert!(dynamics_verdict(100, &p));
        assert!(!dynamics_verdict(101, &p));
    }

    #[test]
    fn resolution_boundaries() {
        let p = DetectorParams::default();
        assert!(resolution_verdict(1280, 720, &p));
        assert!(!resolution_verdict(640, 360, &p));
        assert!(resolution_verdict(720, 480, &p));
        assert!(!resolution_verdict(719, 480, &p));
    }

    proptest! {
        #[test]
        fn content_score_symmetric(pa in proptest::collection::vec(0u8..=255, 12),
                                   pb in proptest::collection::vec(0u8..=255, 12)) {
            let a = Frame::new(2, 2, pa).unwrap();
            let b = Frame::new(2, 2, pb).unwrap();
            let ab = content_score(&a, &b).unwrap();
            let ba = content_score(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn higher_threshold_never_more_keyframes(
            seed in 0u64..1000, t1 in 0.0f64..100.0, t2 in 0.0f64..100.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<Frame> = (0..30)
                .map(|_| Frame::filled(2, 2, [rng.gen(), rng.gen(), rng.gen()]))
                .collect();
            let s = stream_of(frames);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mk = |t: f64| DetectorParams { content_threshold: t, min_gap_frames: 1, ..DetectorParams::default() };
            let k_lo = detect_keyframes(&s, &mk(lo)).unwrap().len();
            let k_hi = detect_keyframes(&s, &mk(hi)).unwrap().len();
            prop_assert!(k_hi <= k_lo);
        }

        #[test]
        fn keyframes_strictly_increasing_with_gap(seed in 0u64..500, gap in 1usize..8) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<Frame> = (0..60)
                .map(|_| Frame::filled(2, 2, [rng.gen(), rng.gen(), rng.gen()]))
                .collect();
            let s = stream_of(frames);
            let params = DetectorParams { min_gap_frames: gap, ..DetectorParams::default() };
            let kf = detect_keyframes(&s, &params).unwrap();
            prop_assert_eq!(kf[0], 0);
            for w in kf.windows(2) {
                prop_assert!(w[1] > w[0]);
                prop_assert!(w[1] - w[0] >= gap);
            }
        }

        #[test]
        fn verdict_matches_membership(k in 0u64..200) {
            let p = DetectorParams::default();
            let brute = (p.keyframe_lower..=p.keyframe_upper).contains(&k);
            prop_assert_eq!(dynamics_verdict(k, &p), brute);
        }
    }
}
