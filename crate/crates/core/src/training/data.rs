use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::SAMPLE_RATE;
use crate::datasim::{Manifest, ManifestEntry, MixtureSample};
use crate::error::{Error, Result};
use crate::separator::CueBatch;
use crate::visual::NUM_JOINTS;

/// 0.2 s: the shortest span that is a whole number of both audio samples and 15 FPS frames.
pub const CROP_QUANTUM: usize = SAMPLE_RATE as usize / 5;

/// Lip frame size used for the zero block when no sample in a batch has lips.
pub const DEFAULT_LIP_SIZE: (usize, usize) = (24, 24);

/// Indexed access to mixture samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<MixtureSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Vec<MixtureSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<MixtureSample> {
        self.as_slice()
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range")))
    }
}

impl SampleSource for [MixtureSample] {
    fn len(&self) -> usize {
        <[MixtureSample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<MixtureSample> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range")))
    }
}

/// One split of an on-disk corpus, read lazily. Recently used samples stay cached.
pub struct ManifestSource<'a> {
    manifest: &'a Manifest,
    entries: Vec<&'a ManifestEntry>,
    cache: Mutex<Vec<Option<MixtureSample>>>,
    cache_all: bool,
}

impl<'a> ManifestSource<'a> {
    /// `cache_all` keeps every loaded sample in memory.
    pub fn new(manifest: &'a Manifest, entries: Vec<&'a ManifestEntry>, cache_all: bool) -> Self {
        let cache = Mutex::new(vec![None; if cache_all { entries.len() } else { 0 }]);
        Self { manifest, entries, cache, cache_all }
    }

    pub fn entries(&self) -> &[&'a ManifestEntry] {
        &self.entries
    }
}

impl SampleSource for ManifestSource<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> Result<MixtureSample> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range")))?;
        if self.cache_all {
            if let Some(s) = &self.cache.lock().expect("cache lock")[index] {
                return Ok(s.clone());
            }
        }
        let sample = self.manifest.load(entry).map_err(|e| match e {
            Error::Io { path, source } => Error::Format {
                path,
                msg: format!("sample {}: {source}", entry.id),
            },
            other => other,
        })?;
        if self.cache_all {
            self.cache.lock().expect("cache lock")[index] = Some(sample.clone());
        }
        Ok(sample)
    }
}

/// Tensors for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, len]`
    pub mixture: Tensor,
    /// `[B, len]`
    pub target: Tensor,
    pub cues: CueBatch,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows where both cues are present.
    pub fn both_present(&self) -> Vec<bool> {
        self.cues.lip_present.iter().zip(&self.cues.gesture_present).map(|(&l, &g)| l && g).collect()
    }
}

/// Stacks equal-length samples. Missing cues become zero tensors with the presence
/// flag cleared.
pub fn assemble(samples: &[MixtureSample], lip_size: (usize, usize), dtype: DType) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let len = first.len();
    let frames = first.lip.as_ref().map(|l| l.num_frames()).or(first.gesture.as_ref().map(|g| g.num_frames()));
    let frames = frames.ok_or_else(|| Error::invalid(format!("sample {} has no visual cue", first.id)))?;
    let (h, w) = samples
        .iter()
        .find_map(|s| s.lip.as_ref().map(|l| (l.height(), l.width())))
        .unwrap_or(lip_size);
    let b = samples.len();
    let mut mixture = Vec::with_capacity(b * len);
    let mut target = Vec::with_capacity(b * len);
    let mut lips = vec![0f32; b * frames * h * w];
    let mut poses = vec![0f32; b * frames * NUM_JOINTS * 3];
    let mut lip_present = Vec::with_capacity(b);
    let mut gesture_present = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        if s.len() != len {
            return Err(Error::invalid(format!("sample {} has {} samples, batch expects {len}", s.id, s.len())));
        }
        mixture.extend_from_slice(s.mixture.samples());
        target.extend_from_slice(s.target.samples());
        if let Some(l) = &s.lip {
            if l.num_frames() != frames || (l.height(), l.width()) != (h, w) {
                return Err(Error::invalid(format!("sample {} lip shape differs within the batch", s.id)));
            }
            lips[i * frames * h * w..(i + 1) * frames * h * w].copy_from_slice(l.data());
        }
        if let Some(g) = &s.gesture {
            if g.num_frames() != frames {
                return Err(Error::invalid(format!("sample {} pose length differs within the batch", s.id)));
            }
            let n = frames * NUM_JOINTS * 3;
            poses[i * n..(i + 1) * n].copy_from_slice(&g.normalized());
        }
        lip_present.push(s.lip.is_some());
        gesture_present.push(s.gesture.is_some());
    }
    let dev = Device::Cpu;
    let t = |v: Vec<f32>, shape: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(v, shape, &dev)?.to_dtype(dtype)?) };
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        mixture: t(mixture, &[b, len])?,
        target: t(target, &[b, len])?,
        cues: CueBatch {
            lips: Some(t(lips, &[b, frames, h, w])?),
            poses: Some(t(poses, &[b, frames, NUM_JOINTS * 3])?),
            lip_present,
            gesture_present,
        },
    })
}

/// Random frame-aligned crop of `len` samples. Clips that are not longer are cut to
/// their last aligned boundary instead.
///
/// A crop where the target is nearly silent carries no training signal and has no
/// defined SI-SNR, so such draws are repeated a few times; if every draw is quiet the
/// loudest one is used.
pub fn random_crop(sample: &MixtureSample, len: usize, rng: &mut ChaCha8Rng) -> Result<MixtureSample> {
    let usable = sample.len() / CROP_QUANTUM * CROP_QUANTUM;
    if usable <= len {
        return Ok(if usable == 0 { sample.clone() } else { sample.truncated(usable) });
    }
    let slots = (usable - len) / CROP_QUANTUM;
    let target = sample.target.samples();
    let mean_power = sample.target.energy() / sample.len() as f64;
    let floor = QUIET_CROP_RATIO * mean_power * len as f64;
    let mut best = (f64::NEG_INFINITY, 0);
    for _ in 0..CROP_ATTEMPTS {
        let start = rng.random_range(0..=slots) * CROP_QUANTUM;
        let energy: f64 = target[start..start + len].iter().map(|&x| (x as f64) * (x as f64)).sum();
        if energy > floor {
            return sample.crop(start, len);
        }
        if energy > best.0 {
            best = (energy, start);
        }
    }
    sample.crop(best.1, len)
}

const CROP_ATTEMPTS: usize = 10;
/// Crops below this fraction of the clip's average target power count as silent.
const QUIET_CROP_RATIO: f64 = 0.05;

/// Seconds to a sample count rounded down to the crop quantum.
pub fn secs_to_quantum(secs: f64) -> usize {
    let n = (secs * SAMPLE_RATE as f64).round() as usize;
    (n / CROP_QUANTUM).max(1) * CROP_QUANTUM
}
