use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame rate of both visual cue streams.
pub const VISUAL_FPS: u32 = 15;

pub const NUM_JOINTS: usize = 10;

/// Joint order of every pose frame.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "head",
    "neck",
    "nose",
    "spine",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
];

pub mod joint {
    pub const HEAD: usize = 0;
    pub const NECK: usize = 1;
    pub const NOSE: usize = 2;
    pub const SPINE: usize = 3;
    pub const L_SHOULDER: usize = 4;
    pub const R_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const R_ELBOW: usize = 7;
    pub const L_WRIST: usize = 8;
    pub const R_WRIST: usize = 9;
}

pub type PoseFrame = [[f32; 3]; NUM_JOINTS];

/// Upper-body 3-D skeleton track at 15 FPS.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: Vec<PoseFrame>,
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    fps: u32,
    joint_names: Vec<String>,
    data: Vec<PoseFrame>,
}

impl PoseSequence {
    pub fn new(frames: Vec<PoseFrame>) -> Result<Self> {
        for (f, frame) in frames.iter().enumerate() {
            if frame.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("pose frame {f} has non-finite coordinates")));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn truncated(&self, frames: usize) -> Self {
        Self {
            frames: self.frames[..frames.min(self.frames.len())].to_vec(),
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.frames.len());
        Self {
            frames: self.frames[start.min(end)..end].to_vec(),
        }
    }

    /// Flattened `[F, 30]` features: each frame re-centered on the spine joint, the
    /// whole sequence divided by its mean shoulder distance.
    pub fn normalized(&self) -> Vec<f32> {
        let mut shoulder = 0.0f64;
        for frame in &self.frames {
            let l = frame[joint::L_SHOULDER];
            let r = frame[joint::R_SHOULDER];
            let d: f64 = (0..3).map(|k| ((l[k] - r[k]) as f64).powi(2)).sum::<f64>().sqrt();
            shoulder += d;
        }
        shoulder /= self.frames.len().max(1) as f64;
        let scale = if shoulder > 1e-6 { (1.0 / shoulder) as f32 } else { 1.0 };
        let mut out = Vec::with_capacity(self.frames.len() * NUM_JOINTS * 3);
        for frame in &self.frames {
            let spine = frame[joint::SPINE];
            for j in frame {
                for k in 0..3 {
                    out.push((j[k] - spine[k]) * scale);
                }
            }
        }
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = PoseFile {
            fps: VISUAL_FPS,
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            data: self.frames.clone(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PoseFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.fps != VISUAL_FPS {
            return Err(Error::format(path, format!("expected {VISUAL_FPS} fps, found {}", file.fps)));
        }
        if file.joint_names.len() != NUM_JOINTS
            || file.joint_names.iter().zip(JOINT_NAMES).any(|(a, b)| a != b)
        {
            return Err(Error::format(path, format!("joint names must be {JOINT_NAMES:?}")));
        }
        Self::new(file.data).map_err(|e| Error::format(path, e.to_string()))
    }
}
