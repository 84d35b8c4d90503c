use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::lip::LipSequence;
use super::pose::{PoseSequence, NUM_JOINTS, VISUAL_FPS};
use crate::error::{Error, Result};
use crate::nn::{Blstm, Ctx, Init, Linear, ParamStore};

/// A frame-indexed latent matrix `[F, D]` at `rate` frames per second.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub frames: Tensor,
    pub rate: f64,
}

impl EmbeddingSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.dims()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GestureEncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for GestureEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden: 32,
            dropout: 0.3,
        }
    }
}

impl GestureEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("gesture dropout {} not in [0, 1)", self.dropout)));
        }
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("gesture encoder needs layers >= 1 and hidden >= 1".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Multi-layer BLSTM over normalized 10-joint poses; emits one embedding per pose frame.
#[derive(Debug, Clone)]
pub struct GestureEncoder {
    cfg: GestureEncoderConfig,
    blstm: Blstm,
}

impl GestureEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: GestureEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blstm = Blstm::new(store, &format!("{name}.blstm"), NUM_JOINTS * 3, cfg.hidden, cfg.layers, cfg.dropout)?;
        Ok(Self { cfg, blstm })
    }

    pub fn config(&self) -> &GestureEncoderConfig {
        &self.cfg
    }

    pub fn num_layers(&self) -> usize {
        self.blstm.num_layers()
    }

    /// `poses: [B, F, 30]` normalized joint coordinates to `[B, F, 2 * hidden]`.
    pub fn forward(&self, poses: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        self.blstm.forward(poses, ctx)
    }

    pub fn encode(&self, poses: &PoseSequence, dtype: DType, ctx: &mut Ctx) -> Result<EmbeddingSequence> {
        if poses.num_frames() == 0 {
            return Err(Error::invalid("pose sequence has no frames"));
        }
        let x = pose_tensor(poses, dtype)?.unsqueeze(0)?;
        let frames = self.forward(&x, ctx)?.squeeze(0)?;
        Ok(EmbeddingSequence {
            frames,
            rate: VISUAL_FPS as f64,
        })
    }
}

/// `[F, 30]` tensor of normalized pose features.
pub fn pose_tensor(poses: &PoseSequence, dtype: DType) -> Result<Tensor> {
    let data = poses.normalized();
    Ok(Tensor::from_vec(data, (poses.num_frames(), NUM_JOINTS * 3), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// `[F, H, W]` tensor of lip intensities.
pub fn lip_tensor(lips: &LipSequence, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(
        lips.data(),
        (lips.num_frames(), lips.height(), lips.width()),
        &candle_core::Device::Cpu,
    )?
    .to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResBlockSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Lip front-end topology: a spatio-temporal stem, residual 2-D blocks applied per
/// frame, global pooling, then temporal convolution blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipEncoderConfig {
    pub stem_channels: usize,
    pub temporal_kernel: usize,
    pub res_blocks: Vec<ResBlockSpec>,
    pub temporal_blocks: usize,
    pub out_dim: usize,
}

impl LipEncoderConfig {
    /// Desk-scale stack: 3-D stem, 4 residual blocks, 2 temporal blocks, 64-dim output.
    pub fn lite() -> Self {
        Self {
            stem_channels: 8,
            temporal_kernel: 5,
            res_blocks: vec![
                ResBlockSpec { channels: 8, stride: 1 },
                ResBlockSpec { channels: 16, stride: 2 },
                ResBlockSpec { channels: 16, stride: 1 },
                ResBlockSpec { channels: 32, stride: 2 },
            ],
            temporal_blocks: 2,
            out_dim: 64,
        }
    }

    /// Full-size topology: 3-D stem, an 18-layer residual trunk (stem conv, eight basic
    /// blocks of two convs, and the output projection), five temporal blocks, 512-dim output.
    pub fn full() -> Self {
        let stage = |channels, stride| {
            [ResBlockSpec { channels, stride }, ResBlockSpec { channels, stride: 1 }]
        };
        let res_blocks = [stage(64, 1), stage(128, 2), stage(256, 2), stage(512, 2)]
            .into_iter()
            .flatten()
            .collect();
        Self {
            stem_channels: 64,
            temporal_kernel: 5,
            res_blocks,
            temporal_blocks: 5,
            out_dim: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config("lip temporal kernel must be odd".into()));
        }
        if self.stem_channels == 0 || self.out_dim == 0 {
            return Err(Error::Config("lip encoder widths must be positive".into()));
        }
        if self.res_blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return Err(Error::Config("residual block widths and strides must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LipEncoderConfig {
    fn default() -> Self {
        Self::lite()
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Ok(Self {
            weight: store.get(&format!("{name}.weight"), &[cout, cin, k, k], Init::Uniform(bound))?,
            bias: store.get(&format!("{name}.bias"), &[cout], Init::Zeros)?,
            stride,
            padding: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, spec: ResBlockSpec) -> Result<Self> {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, spec.channels, 3, spec.stride)?;
        let conv2 = Conv::new(store, &format!("{name}.conv2"), spec.channels, spec.channels, 3, 1)?;
        let shortcut = if cin != spec.channels || spec.stride != 1 {
            Some(Conv::new(store, &format!("{name}.shortcut"), cin, spec.channels, 1, spec.stride)?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, shortcut })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// Kernel-3 convolution over time with a residual connection: `x + relu(W [x_{t-1}; x_t; x_{t+1}])`.
#[derive(Debug, Clone)]
struct TemporalBlock {
    proj: Linear,
}

impl TemporalBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, 3 * dim, dim, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = x.dims()[1];
        let padded = x.pad_with_zeros(1, 1, 1)?;
        let window = Tensor::cat(
            &[padded.narrow(1, 0, f)?, padded.narrow(1, 1, f)?, padded.narrow(1, 2, f)?],
            2,
        )?;
        Ok((x + self.proj.forward(&window)?.relu()?)?)
    }
}

/// Maps lip image sequences to per-frame embeddings.
#[derive(Debug, Clone)]
pub struct LipEncoder {
    cfg: LipEncoderConfig,
    stem: Conv,
    blocks: Vec<ResBlock>,
    proj: Linear,
    temporal: Vec<TemporalBlock>,
}

impl LipEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: LipEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv::new(store, &format!("{name}.stem"), cfg.temporal_kernel, cfg.stem_channels, 3, 2)?;
        let mut blocks = Vec::with_capacity(cfg.res_blocks.len());
        let mut cin = cfg.stem_channels;
        for (i, spec) in cfg.res_blocks.iter().enumerate() {
            blocks.push(ResBlock::new(store, &format!("{name}.res{i}"), cin, *spec)?);
            cin = spec.channels;
        }
        let proj = Linear::new(store, &format!("{name}.proj"), cin, cfg.out_dim, true)?;
        let temporal = (0..cfg.temporal_blocks)
            .map(|i| TemporalBlock::new(store, &format!("{name}.tcn{i}"), cfg.out_dim))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, stem, blocks, proj, temporal })
    }

    pub fn config(&self) -> &LipEncoderConfig {
        &self.cfg
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_temporal_blocks(&self) -> usize {
        self.temporal.len()
    }

    /// `lips: [B, F, H, W]` to `[B, F, out_dim]`.
    pub fn forward(&self, lips: &Tensor) -> Result<Tensor> {
        let (b, f, h, w) = lips.dims4()?;
        let k = self.cfg.temporal_kernel;
        let half = k / 2;
        // The spatio-temporal stem: stack k neighbouring frames as channels.
        let padded = lips.pad_with_zeros(1, half, half)?;
        let stacked: Vec<Tensor> = (0..k)
            .map(|j| padded.narrow(1, j, f)?.unsqueeze(2))
            .collect::<candle_core::Result<_>>()?;
        let x = Tensor::cat(&stacked, 2)?.reshape((b * f, k, h, w))?;
        let mut x = self.stem.forward(&x)?.relu()?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let pooled = x.mean(3)?.mean(2)?;
        let channels = pooled.dims()[1];
        let mut y = self.proj.forward(&pooled.reshape((b, f, channels))?)?;
        for block in &self.temporal {
            y = block.forward(&y)?;
        }
        Ok(y)
    }

    pub fn encode(&self, lips: &LipSequence, dtype: DType) -> Result<EmbeddingSequence> {
        if lips.num_frames() == 0 {
            return Err(Error::invalid("lip sequence has no frames"));
        }
        let x = lip_tensor(lips, dtype)?.unsqueeze(0)?;
        Ok(EmbeddingSequence {
            frames: self.forward(&x)?.squeeze(0)?,
            rate: VISUAL_FPS as f64,
        })
    }
}

/// Source frame for each of `target` output frames under nearest-neighbour repetition.
pub fn upsample_indices(source: usize, target: usize) -> Vec<u32> {
    (0..target).map(|t| (t * source / target) as u32).collect()
}

/// Repeats frames of `[B, F, D]` to `[B, target, D]`; frame `t` copies `floor(t * F / target)`.
pub fn upsample_tensor(emb: &Tensor, target: usize) -> Result<Tensor> {
    let f = emb.dims()[1];
    if f == 0 {
        return Err(Error::invalid("cannot upsample an empty sequence"));
    }
    if target < f {
        return Err(Error::invalid(format!("cannot upsample {f} frames down to {target}")));
    }
    if target == f {
        return Ok(emb.clone());
    }
    let idx = Tensor::from_vec(upsample_indices(f, target), target, emb.device())?;
    Ok(emb.index_select(&idx, 1)?)
}

pub fn upsample_to_rate(emb: &EmbeddingSequence, target_frames: usize) -> Result<EmbeddingSequence> {
    let frames = upsample_tensor(&emb.frames.unsqueeze(0)?, target_frames)?.squeeze(0)?;
    let rate = emb.rate * target_frames as f64 / emb.num_frames() as f64;
    Ok(EmbeddingSequence { frames, rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::visual::pose::PoseFrame;
    use candle_core::Device;

    fn poses(f: usize) -> PoseSequence {
        let frames: Vec<PoseFrame> = (0..f)
            .map(|i| {
                let mut fr = [[0.0f32; 3]; NUM_JOINTS];
                for (j, joint) in fr.iter_mut().enumerate() {
                    *joint = [j as f32 * 0.1, (i as f32 * 0.3).sin(), 0.05 * j as f32];
                }
                fr
            })
            .collect();
        PoseSequence::new(frames).unwrap()
    }

    #[test]
    fn gesture_embedding_shape_and_eval_determinism() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = GestureEncoder::new(&mut store, "gesture", GestureEncoderConfig::default()).unwrap();
        assert_eq!(enc.num_layers(), 5);
        let p = poses(30);
        let a = enc.encode(&p, DType::F32, &mut Ctx::eval()).unwrap();
        let b = enc.encode(&p, DType::F32, &mut Ctx::eval()).unwrap();
        assert_eq!(a.frames.dims(), &[30, 64]);
        let va: Vec<Vec<f32>> = a.frames.to_vec2().unwrap();
        let vb: Vec<Vec<f32>> = b.frames.to_vec2().unwrap();
        assert_eq!(va, vb);
        let w = store.var("gesture.blstm.l4.bwd.w_hh").unwrap();
        assert_eq!(w.dims(), &[32, 128]);
        let w0 = store.var("gesture.blstm.l0.fwd.w_ih").unwrap();
        assert_eq!(w0.dims(), &[30, 128]);
    }

    #[test]
    fn bad_dropout_is_a_config_error() {
        let cfg = GestureEncoderConfig { dropout: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lip_encoder_preserves_frames_and_handles_black_frames() {
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = LipEncoder::new(&mut store, "lip", LipEncoderConfig::lite()).unwrap();
        let lips = LipSequence::new(30, 24, 24, vec![0.0; 30 * 24 * 24]).unwrap();
        let out = enc.encode(&lips, DType::F32).unwrap();
        assert_eq!(out.frames.dims(), &[30, 64]);
        let v: Vec<Vec<f32>> = out.frames.to_vec2().unwrap();
        assert!(v.iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn full_lip_topology() {
        let cfg = LipEncoderConfig::full();
        let mut store = ParamStore::new(DType::F32, 0);
        let enc = LipEncoder::new(&mut store, "lip", cfg).unwrap();
        assert_eq!(enc.num_residual_blocks(), 8);
        assert_eq!(enc.num_temporal_blocks(), 5);
        // 3-D stem + 8 blocks x 2 convs + projection
        assert_eq!(1 + 2 * enc.num_residual_blocks() + 1, 18);
        let lips = Tensor::zeros((1, 2, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&lips).unwrap().dims(), &[1, 2, 512]);
    }

    #[test]
    fn upsample_multiplicities() {
        let idx = upsample_indices(30, 1599);
        let mut counts = [0usize; 30];
        for &i in &idx {
            counts[i as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 53 || c == 54), "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 1599);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));

        let single = Tensor::new(&[[[1.0f32, 2.0]]], &Device::Cpu).unwrap();
        let up: Vec<Vec<f32>> = upsample_tensor(&single, 10).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(up, vec![vec![1.0, 2.0]; 10]);
        assert!(upsample_tensor(&Tensor::zeros((1, 5, 2), DType::F32, &Device::Cpu).unwrap(), 4).is_err());
    }
}
