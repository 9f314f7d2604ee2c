//! Frame-stream ingestion and preprocessing: raw RGB24 interchange, bilinear
//! resize to the target resolution (720x480 by default) and uniform sampling
//! to a fixed 49-frame length with all-zero padding for short clips.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

pub const TARGET_WIDTH: u32 = 720;
pub const TARGET_HEIGHT: u32 = 480;
pub const TARGET_FRAMES: usize = 49;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sidecar {0} missing or unreadable: {1}")]
    Sidecar(String, String),
    #[error("raw file size {size} not divisible by frame stride {stride} ({width}x{height} RGB24)")]
    StrideMismatch {
        size: u64,
        stride: u64,
        width: u32,
        height: u32,
    },
    #[error("frame count mismatch: sidecar says {expected}, file holds {actual}")]
    FrameCountMismatch { expected: usize, actual: usize },
    #[error("decoder command {command:?} exited with status {status}")]
    DecoderFailed { command: String, status: i32 },
    #[error("invalid frame stream: {0}")]
    Invalid(String),
    #[error("frame dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("resize target has a zero dimension")]
    ZeroTarget,
}

/// One RGB24 image, row-major, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, FrameError> {
        if data.len() != (width as usize) * (height as usize) * 3 {
            return Err(FrameError::Invalid(format!(
                "frame data length {} does not match {}x{} RGB24",
                data.len(),
                width,
                height
            )));
        }
        Ok(Frame { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Frame { width, height, data }
    }

    pub fn zero(width: u32, height: u32) -> Self {
        Frame {
            width,
            height,
            data: vec![0u8; (width as usize) * (height as usize) * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStream {
    pub clip_id: String,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub frames: Vec<Frame>,
}

impl FrameStream {
    pub fn new(
        clip_id: &str,
        width: u32,
        height: u32,
        fps: f64,
        frames: Vec<Frame>,
    ) -> Result<Self, FrameError> {
        if frames.is_empty() {
            return Err(FrameError::Invalid("frame count must be >= 1".into()));
        }
        if !(fps > 0.0) {
            return Err(FrameError::Invalid(format!("fps must be > 0, got {fps}")));
        }
        for f in &frames {
            if f.width != width || f.height != height {
                return Err(FrameError::DimensionMismatch(f.width, f.height, width, height));
            }
        }
        Ok(FrameStream {
            clip_id: clip_id.to_string(),
            width,
            height,
            fps,
            frames,
        })
    }
}

/// Sidecar JSON describing a raw RGB24 frame file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub frame_count: usize,
}

/// Where frames come from: either a raw file already on disk, or an external
/// decoder command that produces one. The command template receives the
/// `{input}` and `{output}` placeholders and must exit 0 after writing both
/// the raw file and its `<output>.json` sidecar.
#[derive(Debug, Clone)]
pub enum FrameSource {
    Raw { data: PathBuf, sidecar: PathBuf },
    Decoder {
        command: Vec<String>,
        input: PathBuf,
        output: PathBuf,
    },
}

pub fn ingest_frames(clip_id: &str, source: &FrameSource) -> Result<FrameStream, FrameError> {
    match source {
        FrameSource::Raw { data, sidecar } => read_raw(clip_id, data, sidecar),
        FrameSource::Decoder { command, input, output } => {
            if command.is_empty() {
                return Err(FrameError::Invalid("empty decoder command".into()));
            }
            let substituted: Vec<String> = command
                .iter()
                .map(|arg| {
                    arg.replace("{input}", &input.display().to_string())
                        .replace("{output}", &output.display().to_string())
                })
                .collect();
            let status = Command::new(&substituted[0])
                .args(&substituted[1..])
                .status()
                .map_err(|e| FrameError::Io {
                    path: substituted[0].clone(),
                    source: e,
                })?;
            if !status.success() {
                return Err(FrameError::DecoderFailed {
                    command: substituted.join(" "),
                    status: status.code().unwrap_or(-1),
                });
            }
            let sidecar = PathBuf::from(format!("{}.json", output.display()));
            read_raw(clip_id, output, &sidecar)
        }
    }
}

fn read_raw(clip_id: &str, data_path: &Path, sidecar_path: &Path) -> Result<FrameStream, FrameError> {
    let sidecar_text = std::fs::read_to_string(sidecar_path)
        .map_err(|e| FrameError::Sidecar(sidecar_path.display().to_string(), e.to_string()))?;
    let sidecar: Sidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| FrameError::Sidecar(sidecar_path.display().to_string(), e.to_string()))?;
    let bytes = std::fs::read(data_path).map_err(|e| FrameError::Io {
        path: data_path.display().to_string(),
        source: e,
    })?;
    let stride = 3u64 * sidecar.width as u64 * sidecar.height as u64;
    if stride == 0 || bytes.len() as u64 % stride != 0 {
        return Err(FrameError::StrideMismatch {
            size: bytes.len() as u64,
            stride,
            width: sidecar.width,
            height: sidecar.height,
        });
    }
    let actual = (bytes.len() as u64 / stride) as usize;
    if actual != sidecar.frame_count {
        return Err(FrameError::FrameCountMismatch {
            expected: sidecar.frame_count,
            actual,
        });
    }
    let frames: Vec<Frame> = bytes
        .chunks_exact(stride as usize)
        .map(|chunk| Frame {
            width: sidecar.width,
            height: sidecar.height,
            data: chunk.to_vec(),
        })
        .collect();
    FrameStream::new(clip_id, sidecar.width, sidecar.height, sidecar.fps, frames)
}

pub fn write_raw(stream: &FrameStream, data_path: &Path, sidecar_path: &Path) -> Result<(), FrameError> {
    let io_err = |p: &Path, e: std::io::Error| FrameError::Io {
        path: p.display().to_string(),
        source: e,
    };
    let mut bytes = Vec::with_capacity(stream.frames.len() * stream.frames[0].data.len());
    for f in &stream.frames {
        bytes.extend_from_slice(&f.data);
    }
    std::fs::write(data_path, &bytes).map_err(|e| io_err(data_path, e))?;
    let sidecar = Sidecar {
        width: stream.width,
        height: stream.height,
        fps: stream.fps,
        frame_count: stream.frames.len(),
    };
    std::fs::write(sidecar_path, serde_json::to_string(&sidecar).unwrap())
        .map_err(|e| io_err(sidecar_path, e))?;
    Ok(())
}

/// Bilinear resize, aspect ratio deliberately not preserved. Source
/// coordinates map as `sx = x * src_w / dst_w`, so resizing at the source
/// resolution is the identity and an exact 2x upscale interpolates at pixel
/// midpoints.
pub fn resize_clip(stream: &FrameStream, target_w: u32, target_h: u32) -> Result<FrameStream, FrameError> {
    if target_w == 0 || target_h == 0 {
        return Err(FrameError::ZeroTarget);
    }
    if stream.width == target_w && stream.height == target_h {
        return Ok(stream.clone());
    }
    let frames: Vec<Frame> = stream
        .frames
        .iter()
        .map(|f| resize_frame(f, target_w, target_h))
        .collect();
    FrameStream::new(&stream.clip_id, target_w, target_h, stream.fps, frames)
}

fn resize_frame(frame: &Frame, target_w: u32, target_h: u32) -> Frame {
    let sw = frame.width as f64;
    let sh = frame.height as f64;
    let mut out = Frame::zero(target_w, target_h);
    for oy in 0..target_h {
        let sy = (oy as f64 * sh / target_h as f64).min(sh - 1.0);
        let y0 = sy.floor() as u32;
        let y1 = (y0 + 1).min(frame.height - 1);
        let fy = sy - y0 as f64;
        for ox in 0..target_w {
            let sx = (ox as f64 * sw / target_w as f64).min(sw - 1.0);
            let x0 = sx.floor() as u32;
            let x1 = (x0 + 1).min(frame.width - 1);
            let fx = sx - x0 as f64;
            let p00 = frame.pixel(x0, y0);
            let p10 = frame.pixel(x1, y0);
            let p01 = frame.pixel(x0, y1);
            let p11 = frame.pixel(x1, y1);
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                rgb[c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(ox, oy, rgb);
        }
    }
    out
}

/// Index of the i-th of 49 uniformly sampled frames from an F-frame clip,
/// inclusive of both endpoints: `floor(i * (F-1) / 48)`.
pub fn sample_index(i: usize, frame_count: usize) -> usize {
    i * (frame_count - 1) / (TARGET_FRAMES - 1)
}

/// Uniform sampling to exactly 49 frames. Clips shorter than 49 frames keep
/// all their frames and are padded with all-zero frames.
pub fn sample_to_49(stream: &FrameStream) -> FrameStream {
    let f = stream.frames.len();
    let frames: Vec<Frame> = if f >= TARGET_FRAMES {
        (0..TARGET_FRAMES)
            .map(|i| stream.frames[sample_index(i, f)].clone())
            .collect()
    } else {
        let mut frames = stream.frames.clone();
        frames.resize(TARGET_FRAMES, Frame::zero(stream.width, stream.height));
        frames
    };
    FrameStream {
        clip_id: stream.clip_id.clone(),
        width: stream.width,
        height: stream.height,
        fps: stream.fps,
        frames,
    }
}
