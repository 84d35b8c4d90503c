use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::waveform::Waveform;
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};

/// Encoder/decoder geometry: `channels` latent units per frame, `kernel` samples per
/// frame, hop of `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default)]
    pub encoder_bias: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            kernel: 40,
            encoder_bias: false,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("codec channels must be at least 1".into()));
        }
        if self.kernel < 2 || !self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("codec kernel must be even and >= 2, got {}", self.kernel)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.kernel / 2
    }

    /// Frames produced for `len` samples, `None` when `len < kernel`.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        frame_count(len, self.kernel, self.stride())
    }

    /// Samples covered by `frames` overlapping frames.
    pub fn span(&self, frames: usize) -> usize {
        (frames - 1) * self.stride() + self.kernel
    }
}

/// `floor((len - kernel) / stride) + 1`; the tail shorter than one hop is dropped.
pub fn frame_count(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if len < kernel || stride == 0 {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

/// The latent frame sequence of one utterance, `[T, N]`.
#[derive(Debug, Clone)]
pub struct MixtureEmbedding {
    pub frames: Tensor,
    pub kernel: usize,
    pub stride: usize,
}

impl MixtureEmbedding {
    pub fn num_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.frames.dims()[1]
    }
}

/// Overlap-add of `frames` (row-major `[T, L]`) with hop `stride`:
/// `out[i] = sum_t frames[t, i - t * stride]` over valid indices.
pub fn overlap_add(frames: &[f32], frame_len: usize, stride: usize) -> Result<Vec<f32>> {
    if stride == 0 {
        return Err(Error::invalid("overlap-add stride must be positive"));
    }
    if frame_len == 0 || !frames.len().is_multiple_of(frame_len) {
        return Err(Error::invalid(format!(
            "overlap-add input of {} values is not a whole number of {frame_len}-sample frames",
            frames.len()
        )));
    }
    if stride > frame_len {
        return Err(Error::invalid(format!("stride {stride} exceeds frame length {frame_len}")));
    }
    let count = frames.len() / frame_len;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut out = vec![0.0f32; (count - 1) * stride + frame_len];
    for (t, frame) in frames.chunks_exact(frame_len).enumerate() {
        let dst = &mut out[t * stride..t * stride + frame_len];
        for (o, &v) in dst.iter_mut().zip(frame) {
            *o += v;
        }
    }
    Ok(out)
}

/// Slices `wave: [B, len]` into `[B, T, kernel]` frames. `stride` must divide `kernel`.
pub fn frame_tensor(wave: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (_, len) = wave.dims2()?;
    if !kernel.is_multiple_of(stride) {
        return Err(Error::invalid(format!("stride {stride} does not divide kernel {kernel}")));
    }
    let frames = frame_count(len, kernel, stride)
        .ok_or_else(|| Error::invalid(format!("waveform of {len} samples is shorter than one {kernel}-sample frame")))?;
    let parts = kernel / stride;
    let segments = frames - 1 + parts;
    let b = wave.dims()[0];
    let hops = wave.narrow(1, 0, segments * stride)?.reshape((b, segments, stride))?;
    let pieces: Vec<Tensor> = (0..parts)
        .map(|j| hops.narrow(1, j, frames))
        .collect::<candle_core::Result<_>>()?;
    Ok(Tensor::cat(&pieces, 2)?)
}

/// Tensor overlap-add: `[B, T, L]` frames with hop `stride` (dividing `L`) to
/// `[B, (T - 1) * stride + L]`. Differentiable.
pub fn overlap_add_tensor(frames: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, t, l) = frames.dims3()?;
    if stride == 0 || l % stride != 0 {
        return Err(Error::invalid(format!("stride {stride} does not divide frame length {l}")));
    }
    let parts = l / stride;
    let mut acc: Option<Tensor> = None;
    for j in 0..parts {
        let piece = frames.narrow(2, j * stride, stride)?;
        let shifted = piece.pad_with_zeros(1, j, parts - 1 - j)?;
        acc = Some(match acc {
            None => shifted,
            Some(a) => (a + shifted)?,
        });
    }
    let acc = acc.expect("at least one part");
    Ok(acc.reshape((b, (t - 1 + parts) * stride))?)
}

/// Learnable framed analysis transform: a strided 1-D convolution followed by ReLU.
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    cfg: CodecConfig,
    weight: Tensor,
    bias: Option<Tensor>,
    relu: bool,
}

impl SpeechEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (cfg.kernel as f64).sqrt();
        let weight = store.get(&format!("{name}.weight"), &[cfg.kernel, cfg.channels], Init::Uniform(bound))?;
        let bias = if cfg.encoder_bias {
            Some(store.get(&format!("{name}.bias"), &[cfg.channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { cfg, weight, bias, relu: true })
    }

    /// Builds an encoder from explicit weights `[kernel, channels]`.
    pub fn from_weight(cfg: CodecConfig, weight: Tensor, relu: bool) -> Result<Self> {
        cfg.validate()?;
        if weight.dims() != [cfg.kernel, cfg.channels] {
            return Err(Error::invalid(format!("encoder weight {:?} does not match config", weight.dims())));
        }
        Ok(Self { cfg, weight, bias: None, relu })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// `wave: [B, len]` to `[B, T, N]`.
    pub fn forward(&self, wave: &Tensor) -> Result<Tensor> {
        let frames = frame_tensor(wave, self.cfg.kernel, self.cfg.stride())?;
        let mut x = frames.broadcast_matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            x = x.broadcast_add(b)?;
        }
        Ok(if self.relu { x.relu()? } else { x })
    }

    pub fn encode(&self, wave: &Waveform, dtype: DType) -> Result<MixtureEmbedding> {
        if wave.len() < self.cfg.kernel {
            return Err(Error::invalid(format!(
                "waveform of {} samples is shorter than the {}-sample kernel",
                wave.len(),
                self.cfg.kernel
            )));
        }
        let t = Tensor::from_slice(wave.samples(), (1, wave.len()), self.weight.device())?.to_dtype(dtype)?;
        let frames = self.forward(&t)?.squeeze(0)?;
        Ok(MixtureEmbedding {
            frames,
            kernel: self.cfg.kernel,
            stride: self.cfg.stride(),
        })
    }
}

/// Linear synthesis from latent frames followed by overlap-add.
#[derive(Debug, Clone)]
pub struct SpeechDecoder {
    cfg: CodecConfig,
    weight: Tensor,
}

impl SpeechDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (cfg.channels as f64).sqrt();
        let weight = store.get(&format!("{name}.weight"), &[cfg.channels, cfg.kernel], Init::Uniform(bound))?;
        Ok(Self { cfg, weight })
    }

    /// Builds a decoder from explicit weights `[channels, kernel]`.
    pub fn from_weight(cfg: CodecConfig, weight: Tensor) -> Result<Self> {
        cfg.validate()?;
        if weight.dims() != [cfg.channels, cfg.kernel] {
            return Err(Error::invalid(format!("decoder weight {:?} does not match config", weight.dims())));
        }
        Ok(Self { cfg, weight })
    }

    /// `masked: [B, T, N]` to `[B, target_len]`, trimming or zero-padding the tail.
    pub fn forward(&self, masked: &Tensor, target_len: usize) -> Result<Tensor> {
        let (_, t, _) = masked.dims3()?;
        if t == 0 {
            return Err(Error::invalid("cannot decode zero frames"));
        }
        let natural = self.cfg.span(t);
        if natural.abs_diff(target_len) > self.cfg.kernel {
            return Err(Error::invalid(format!(
                "target length {target_len} is more than one kernel away from the {natural} samples spanned by {t} frames"
            )));
        }
        let frames = masked.broadcast_matmul(&self.weight)?;
        let wave = overlap_add_tensor(&frames, self.cfg.stride())?;
        fit_length(&wave, target_len)
    }

    pub fn decode(&self, masked: &MixtureEmbedding, target_len: usize) -> Result<Waveform> {
        let frames = masked.frames.unsqueeze(0)?;
        let finite: f64 = frames.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar()?;
        if !finite.is_finite() {
            return Err(Error::invalid("masked embedding contains non-finite values"));
        }
        let wave = self.forward(&frames, target_len)?;
        let samples: Vec<f32> = wave.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?;
        Waveform::new(samples)
    }
}

/// Trim or zero-pad `[B, len]` to `[B, target]`.
pub(crate) fn fit_length(wave: &Tensor, target: usize) -> Result<Tensor> {
    let (_, len) = wave.dims2()?;
    Ok(if len >= target {
        wave.narrow(1, 0, target)?
    } else {
        wave.pad_with_zeros(1, 0, target - len)?
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn cfg(n: usize, l: usize) -> CodecConfig {
        CodecConfig { channels: n, kernel: l, encoder_bias: false }
    }

    #[test]
    fn two_second_clip_has_1599_frames() {
        // floor((32000 - 40) / 20) + 1, and by sliding a window until it falls off the end.
        let mut windows = 0;
        let mut start = 0;
        while start + 40 <= 32000 {
            windows += 1;
            start += 20;
        }
        assert_eq!(windows, 1599);
        assert_eq!(cfg(256, 40).frame_count(32000), Some(1599));
        assert_eq!(cfg(256, 40).span(1599), 32000);
    }

    #[test]
    fn short_input_is_rejected() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = SpeechEncoder::new(&mut store, "enc", cfg(8, 40)).unwrap();
        let err = enc.encode(&Waveform::zeros(39), DType::F32).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn encoder_output_shape_and_nonnegativity() {
        let mut store = ParamStore::new(DType::F32, 1);
        let enc = SpeechEncoder::new(&mut store, "enc", cfg(256, 40)).unwrap();
        let samples: Vec<f32> = (0..32000).map(|i| ((i as f32) * 0.01).sin()).collect();
        let emb = enc.encode(&Waveform::new(samples).unwrap(), DType::F32).unwrap();
        assert_eq!(emb.frames.dims(), &[1599, 256]);
        let min: f32 = emb.frames.min_all().unwrap().to_scalar().unwrap();
        assert!(min >= 0.0);
    }

    #[test]
    fn zero_wave_encodes_to_zero() {
        let mut store = ParamStore::new(DType::F32, 1);
        let enc = SpeechEncoder::new(&mut store, "enc", cfg(16, 40)).unwrap();
        let emb = enc.encode(&Waveform::zeros(400), DType::F32).unwrap();
        let max: f32 = emb.frames.abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(max, 0.0);
    }

    #[test]
    fn decoder_lengths() {
        let mut store = ParamStore::new(DType::F32, 2);
        let c = cfg(16, 40);
        let dec = SpeechDecoder::new(&mut store, "dec", c).unwrap();
        let emb = |t: usize| MixtureEmbedding {
            frames: Tensor::zeros((t, 16), DType::F32, &Device::Cpu).unwrap(),
            kernel: 40,
            stride: 20,
        };
        assert_eq!(dec.decode(&emb(1599), 32000).unwrap().len(), 32000);
        let single = dec.decode(&emb(1), 40).unwrap();
        assert_eq!(single.len(), 40);
        assert!(single.samples().iter().all(|&s| s == 0.0));
        assert!(dec.decode(&emb(10), 1000).is_err());
    }

    #[test]
    fn overlap_add_constant_frames() {
        let frames = vec![1.0f32; 3 * 4];
        let out = overlap_add(&frames, 4, 2).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0]);
        let single = vec![1.0, 2.0, 3.0];
        assert_eq!(overlap_add(&single, 3, 1).unwrap(), single);
        assert!(overlap_add(&single, 3, 0).is_err());
    }

    fn brute_force_ola(frames: &[f32], l: usize, stride: usize) -> Vec<f32> {
        let t = frames.len() / l;
        let len = (t - 1) * stride + l;
        (0..len)
            .map(|i| {
                let mut acc = 0.0f32;
                for ti in 0..t {
                    if i >= ti * stride && i - ti * stride < l {
                        acc += frames[ti * l + (i - ti * stride)];
                    }
                }
                acc
            })
            .collect()
    }

    proptest! {
        #[test]
        fn overlap_add_matches_double_loop(t in 1usize..12, l in 1usize..10, s_frac in 0.0f64..1.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let stride = 1 + ((l - 1) as f64 * s_frac) as usize;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<f32> = (0..t * l).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assert_eq!(overlap_add(&frames, l, stride).unwrap(), brute_force_ola(&frames, l, stride));
        }

        #[test]
        fn tensor_ola_matches_array_ola(t in 1usize..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<f32> = (0..t * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tensor = Tensor::from_slice(&frames, (1, t, 8), &Device::Cpu).unwrap();
            let out: Vec<f32> = overlap_add_tensor(&tensor, 4).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
            prop_assert_eq!(out, overlap_add(&frames, 8, 4).unwrap());
        }
    }
}
