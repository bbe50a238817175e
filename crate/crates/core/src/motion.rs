//! Motion sequences and their binary file format.
//!
//! Layout (little-endian): `b"FCM1"`, version `u32`, `T u32`, `J u32`, then
//! `T*J*3` `f32` joint positions in meters, then `T` mask bytes (0 or 1).
//! Frame rate and caption live in the dataset manifest.

use std::path::Path;

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"FCM1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Vec<f32>,
    num_frames: usize,
    num_joints: usize,
    pub fps: f32,
    pub caption: String,
    valid_mask: Vec<bool>,
}

impl MotionSequence {
    pub fn new(
        frames: Vec<f32>,
        num_frames: usize,
        num_joints: usize,
        fps: f32,
        caption: impl Into<String>,
        valid_mask: Vec<bool>,
    ) -> Result<Self> {
        let caption = caption.into();
        if num_frames < 2 {
            return Err(CoreError::Validation(format!("motion needs T >= 2, got {num_frames}")));
        }
        if num_joints == 0 {
            return Err(CoreError::Validation("motion needs at least one joint".into()));
        }
        if frames.len() != num_frames * num_joints * 3 {
            return Err(CoreError::Validation(format!(
                "frame buffer has {} values, expected {}",
                frames.len(),
                num_frames * num_joints * 3
            )));
        }
        if valid_mask.len() != num_frames {
            return Err(CoreError::Validation("mask length differs from T".into()));
        }
        if !valid_mask.iter().any(|&m| m) {
            return Err(CoreError::Validation("mask has no valid frame".into()));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Validation(format!("non-finite position at flat index {i}")));
        }
        if caption.trim().is_empty() {
            return Err(CoreError::Validation("caption is empty".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(CoreError::Validation(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, num_frames, num_joints, fps, caption, valid_mask })
    }

    /// All frames valid.
    pub fn full(frames: Vec<f32>, num_frames: usize, num_joints: usize, fps: f32, caption: impl Into<String>) -> Result<Self> {
        Self::new(frames, num_frames, num_joints, fps, caption, vec![true; num_frames])
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    /// Flat `T*J*3` buffer, frame-major.
    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    pub fn position(&self, t: usize, j: usize) -> [f32; 3] {
        let o = (t * self.num_joints + j) * 3;
        [self.frames[o], self.frames[o + 1], self.frames[o + 2]]
    }

    /// Positions as `f64` rows, one `J*3` row per frame.
    pub fn frames_f64(&self) -> Vec<Vec<f64>> {
        self.frames.chunks(self.num_joints * 3).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.frames.len() * 4 + self.num_frames);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.num_frames as u32).to_le_bytes());
        buf.extend_from_slice(&(self.num_joints as u32).to_le_bytes());
        for v in &self.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(self.valid_mask.iter().map(|&m| m as u8));
        buf
    }
}

/// Raw decoded payload of a motion file.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPayload {
    pub num_frames: usize,
    pub num_joints: usize,
    pub frames: Vec<f32>,
    pub valid_mask: Vec<bool>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or(CoreError::Format { offset: bytes.len(), msg: format!("truncated header, needed 4 bytes at {offset}") })?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn decode_payload(bytes: &[u8]) -> Result<MotionPayload> {
    match bytes.get(0..4) {
        Some(m) if m == MAGIC => {}
        Some(_) => return Err(CoreError::Format { offset: 0, msg: "bad magic, expected FCM1".into() }),
        None => return Err(CoreError::Format { offset: bytes.len(), msg: "truncated magic".into() }),
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let t = read_u32(bytes, 8)? as usize;
    let j = read_u32(bytes, 12)? as usize;
    let n = t.checked_mul(j).and_then(|v| v.checked_mul(3)).ok_or(CoreError::Format { offset: 8, msg: "T*J overflows".into() })?;
    let frames_end = HEADER_LEN + n * 4;
    let total = frames_end + t;
    if bytes.len() < total {
        return Err(CoreError::Format { offset: bytes.len(), msg: format!("truncated payload, expected {total} bytes") });
    }
    if bytes.len() > total {
        return Err(CoreError::Format { offset: total, msg: "trailing bytes after payload".into() });
    }
    let frames = bytes[HEADER_LEN..frames_end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut valid_mask = Vec::with_capacity(t);
    for (i, &b) in bytes[frames_end..].iter().enumerate() {
        match b {
            0 => valid_mask.push(false),
            1 => valid_mask.push(true),
            _ => return Err(CoreError::Format { offset: frames_end + i, msg: format!("mask byte {b}") }),
        }
    }
    Ok(MotionPayload { num_frames: t, num_joints: j, frames, valid_mask })
}

pub fn save_motion(path: impl AsRef<Path>, motion: &MotionSequence) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, motion.encode()).map_err(|e| CoreError::io(path, e))
}

/// Loads a motion file; `fps` and `caption` come from the manifest entry.
pub fn load_motion(path: impl AsRef<Path>, fps: f32, caption: &str) -> Result<MotionSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let p = decode_payload(&bytes)?;
    MotionSequence::new(p.frames, p.num_frames, p.num_joints, fps, caption, p.valid_mask)
}
