use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pose::VISUAL_FPS;
use crate::error::{Error, Result};

/// Leading bytes of a raw lip tensor file.
pub const LIP_MAGIC: &[u8; 8] = b"SELGLIP1";

/// Grayscale mouth-region crops at 15 FPS, row-major `[F, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipSequence {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
struct LipSidecar {
    f: usize,
    h: usize,
    w: usize,
    #[serde(rename = "fps")]
    fps: u32,
}

impl LipSequence {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::invalid(format!(
                "lip tensor has {} values, expected {frames}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid(format!(
                "lip intensity {} at index {i} is outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self { frames, height, width, data })
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn truncated(&self, frames: usize) -> Self {
        self.slice(0, frames)
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        let n = self.height * self.width;
        let end = (start + len).min(self.frames);
        let start = start.min(end);
        Self {
            frames: end - start,
            height: self.height,
            width: self.width,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// JSON sidecar path for a raw lip file: the same path with a `.json` extension.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the raw little-endian tensor plus its JSON sidecar.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(8 + 4 * self.data.len());
        bytes.extend_from_slice(LIP_MAGIC);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = LipSidecar {
            f: self.frames,
            h: self.height,
            w: self.width,
            fps: VISUAL_FPS,
        };
        let side = Self::sidecar_path(path);
        std::fs::write(&side, serde_json::to_string(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: LipSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.fps != VISUAL_FPS {
            return Err(Error::format(&side, format!("expected {VISUAL_FPS} fps, found {}", meta.fps)));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..8] != LIP_MAGIC {
            return Err(Error::format(path, "missing lip tensor magic"));
        }
        let body = &bytes[8..];
        let expected = 4 * meta.f * meta.h * meta.w;
        if body.len() != expected {
            return Err(Error::format(
                path,
                format!("payload is {} bytes, sidecar implies {expected}", body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(meta.f, meta.h, meta.w, data).map_err(|e| Error::format(path, e.to_string()))
    }
}
