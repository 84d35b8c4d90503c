use candle_core::{DType, Device, Tensor};

use super::attention::{fuse, CrossAttention};
use super::config::{CueSet, Fusion, ModelConfig};
use super::dual_path::DualPath;
use crate::audio::{fit_length, SpeechDecoder, SpeechEncoder, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::visual::{
    lip_tensor, pose_tensor, upsample_tensor, GestureEncoder, LipEncoder, LipSequence, PoseSequence, VISUAL_FPS,
};

/// Visual inputs for a batch. Tensors are at the native 15 FPS; the presence vectors
/// have one flag per batch row and mark cues that must be treated as missing.
#[derive(Debug, Clone)]
pub struct CueBatch {
    /// `[B, F, H, W]`
    pub lips: Option<Tensor>,
    /// `[B, F, 30]` normalized pose features.
    pub poses: Option<Tensor>,
    pub lip_present: Vec<bool>,
    pub gesture_present: Vec<bool>,
}

impl CueBatch {
    pub fn batch_size(&self) -> usize {
        self.lip_present.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lip_present.len() != self.gesture_present.len() {
            return Err(Error::invalid("presence vectors differ in length"));
        }
        if let Some(i) = self
            .lip_present
            .iter()
            .zip(&self.gesture_present)
            .position(|(l, g)| !l && !g)
        {
            return Err(Error::invalid(format!("batch row {i} has no visual cue")));
        }
        if self.lips.is_none() && self.lip_present.iter().any(|&p| p) {
            return Err(Error::invalid("lip marked present but no lip tensor given"));
        }
        if self.poses.is_none() && self.gesture_present.iter().any(|&p| p) {
            return Err(Error::invalid("gesture marked present but no pose tensor given"));
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Debug)]
pub struct ModelOutput {
    /// `[B, len]`
    pub estimate: Tensor,
    /// `[B, T, N]`, nonnegative.
    pub mask: Tensor,
    /// Raw lip encoder output at 15 FPS, `[B, F, D_l]`.
    pub lip_embedding: Option<Tensor>,
    /// Raw gesture encoder output at 15 FPS, `[B, F, D_g]`.
    pub gesture_embedding: Option<Tensor>,
}

/// `[B, 1, 1]` 0/1 row selector, or `None` when every row is present.
fn row_mask(flags: &[bool], dtype: DType, device: &Device) -> Result<Option<Tensor>> {
    if flags.iter().all(|&f| f) {
        return Ok(None);
    }
    let v: Vec<f32> = flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    Ok(Some(Tensor::from_vec(v, (flags.len(), 1, 1), device)?.to_dtype(dtype)?))
}

fn apply_row_mask(x: Tensor, mask: &Option<Tensor>) -> Result<Tensor> {
    Ok(match mask {
        Some(m) => x.broadcast_mul(m)?,
        None => x,
    })
}

#[derive(Debug, Clone)]
enum FusionStack {
    Attention {
        lip_proj: Option<Linear>,
        lip: Vec<CrossAttention>,
        gesture: Vec<CrossAttention>,
    },
    Concatenation {
        proj: Linear,
    },
}

/// Lip and gesture conditioned target speaker extractor.
#[derive(Debug, Clone)]
pub struct SelgModel {
    cfg: ModelConfig,
    dtype: DType,
    encoder: SpeechEncoder,
    decoder: SpeechDecoder,
    lip_encoder: Option<LipEncoder>,
    gesture_encoder: Option<GestureEncoder>,
    bottleneck: Linear,
    fusion: FusionStack,
    blocks: Vec<DualPath>,
    mask_head: Linear,
}

impl SelgModel {
    pub fn new(cfg: ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let sep = &cfg.separator;
        let d = sep.embed_dim;
        let encoder = SpeechEncoder::new(store, "speech_encoder", cfg.codec)?;
        let decoder = SpeechDecoder::new(store, "speech_decoder", cfg.codec)?;
        let lip_encoder = if cfg.cues.uses_lip() {
            Some(LipEncoder::new(store, "lip_encoder", cfg.lip.clone())?)
        } else {
            None
        };
        let gesture_encoder = if cfg.cues.uses_gesture() {
            Some(GestureEncoder::new(store, "gesture_encoder", cfg.gesture)?)
        } else {
            None
        };
        let bottleneck = Linear::new(store, "separator.bottleneck", cfg.codec.channels, d, true)?;
        let fusion = match cfg.fusion {
            Fusion::Attention => {
                if cfg.cues.uses_gesture() && cfg.gesture.output_dim() != d {
                    return Err(Error::Config(format!(
                        "gesture embedding width {} must equal the attention width {d}",
                        cfg.gesture.output_dim()
                    )));
                }
                let lip_proj = if cfg.cues.uses_lip() && cfg.lip.out_dim != d {
                    Some(Linear::new(store, "separator.lip_proj", cfg.lip.out_dim, d, true)?)
                } else {
                    None
                };
                let layers = |store: &mut ParamStore, cue: &str, used: bool| -> Result<Vec<CrossAttention>> {
                    if !used {
                        return Ok(Vec::new());
                    }
                    (0..sep.repeats)
                        .map(|r| CrossAttention::new(store, &format!("separator.block{r}.{cue}_attention"), sep))
                        .collect()
                };
                let lip = layers(store, "lip", cfg.cues.uses_lip())?;
                let gesture = layers(store, "gesture", cfg.cues.uses_gesture())?;
                FusionStack::Attention { lip_proj, lip, gesture }
            }
            Fusion::Concatenation => {
                let mut width = d;
                if cfg.cues.uses_lip() {
                    width += cfg.lip.out_dim;
                }
                if cfg.cues.uses_gesture() {
                    width += cfg.gesture.output_dim();
                }
                FusionStack::Concatenation {
                    proj: Linear::new(store, "separator.concat_proj", width, d, true)?,
                }
            }
        };
        let blocks = (0..sep.repeats)
            .map(|r| DualPath::new(store, &format!("separator.block{r}.dual_path"), sep))
            .collect::<Result<_>>()?;
        let mask_head = Linear::new(store, "separator.mask_head", d, cfg.codec.channels, true)?;
        Ok(Self {
            cfg,
            dtype: store.dtype(),
            encoder,
            decoder,
            lip_encoder,
            gesture_encoder,
            bottleneck,
            fusion,
            blocks,
            mask_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn speech_encoder(&self) -> &SpeechEncoder {
        &self.encoder
    }

    pub fn speech_decoder(&self) -> &SpeechDecoder {
        &self.decoder
    }

    pub fn lip_encoder(&self) -> Option<&LipEncoder> {
        self.lip_encoder.as_ref()
    }

    pub fn gesture_encoder(&self) -> Option<&GestureEncoder> {
        self.gesture_encoder.as_ref()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Linear bottleneck from the `N`-channel latent to the separator width.
    pub fn project_mixture(&self, latent: &Tensor) -> Result<Tensor> {
        self.bottleneck.forward(latent)
    }

    /// Mask `[B, T, N]` for a mixture latent `[B, T, N]` given 15 FPS cue embeddings.
    pub fn estimate_mask(
        &self,
        latent: &Tensor,
        lip_emb: Option<&Tensor>,
        gesture_emb: Option<&Tensor>,
        lip_present: &[bool],
        gesture_present: &[bool],
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let (b, t, _) = latent.dims3()?;
        let device = latent.device();
        let lip_mask = row_mask(lip_present, self.dtype, device)?;
        let gesture_mask = row_mask(gesture_present, self.dtype, device)?;
        let lip_emb = lip_emb.filter(|_| self.cfg.cues.uses_lip() && lip_present.iter().any(|&p| p));
        let gesture_emb = gesture_emb.filter(|_| self.cfg.cues.uses_gesture() && gesture_present.iter().any(|&p| p));
        let mixture = self.project_mixture(latent)?;

        let mut stream = match &self.fusion {
            FusionStack::Attention { .. } => mixture,
            FusionStack::Concatenation { proj } => {
                let mut parts = vec![mixture];
                if self.cfg.cues.uses_lip() {
                    parts.push(match lip_emb {
                        Some(e) => apply_row_mask(upsample_tensor(e, t)?, &lip_mask)?,
                        None => Tensor::zeros((b, t, self.cfg.lip.out_dim), self.dtype, device)?,
                    });
                }
                if self.cfg.cues.uses_gesture() {
                    parts.push(match gesture_emb {
                        Some(e) => apply_row_mask(upsample_tensor(e, t)?, &gesture_mask)?,
                        None => Tensor::zeros((b, t, self.cfg.gesture.output_dim()), self.dtype, device)?,
                    });
                }
                proj.forward(&Tensor::cat(&parts, 2)?)?
            }
        };

        match &self.fusion {
            FusionStack::Attention { lip_proj, lip, gesture } => {
                let lip_query = match lip_emb {
                    Some(e) => {
                        let e = match lip_proj {
                            Some(p) => p.forward(e)?,
                            None => e.clone(),
                        };
                        Some(upsample_tensor(&e, t)?)
                    }
                    None => None,
                };
                let gesture_query = match gesture_emb {
                    Some(e) => Some(upsample_tensor(e, t)?),
                    None => None,
                };
                for (r, block) in self.blocks.iter().enumerate() {
                    let lip_branch = match &lip_query {
                        Some(q) => Some(apply_row_mask(lip[r].forward(q, &stream, ctx)?, &lip_mask)?),
                        None => None,
                    };
                    let gesture_branch = match &gesture_query {
                        Some(q) => Some(apply_row_mask(gesture[r].forward(q, &stream, ctx)?, &gesture_mask)?),
                        None => None,
                    };
                    let fused = fuse(lip_branch.as_ref(), gesture_branch.as_ref())?;
                    stream = block.forward(&(stream + fused)?, ctx)?;
                }
            }
            FusionStack::Concatenation { .. } => {
                for block in &self.blocks {
                    stream = block.forward(&stream, ctx)?;
                }
            }
        }
        Ok(self.mask_head.forward(&stream)?.relu()?)
    }

    /// Full pass on `mixture: [B, len]`.
    pub fn forward(&self, mixture: &Tensor, cues: &CueBatch, ctx: &mut Ctx) -> Result<ModelOutput> {
        cues.validate()?;
        let (b, len) = mixture.dims2()?;
        if cues.batch_size() != b {
            return Err(Error::invalid(format!("{} presence rows for a batch of {b}", cues.batch_size())));
        }
        let latent = self.encoder.forward(mixture)?;
        let lip_embedding = match (&self.lip_encoder, &cues.lips) {
            (Some(enc), Some(l)) => Some(enc.forward(l)?),
            _ => None,
        };
        let gesture_embedding = match (&self.gesture_encoder, &cues.poses) {
            (Some(enc), Some(p)) => Some(enc.forward(p, ctx)?),
            _ => None,
        };
        if lip_embedding.is_none() && gesture_embedding.is_none() {
            return Err(Error::invalid(format!(
                "model uses {:?} but the batch carries none of those cues",
                self.cfg.cues
            )));
        }
        let mask = self.estimate_mask(
            &latent,
            lip_embedding.as_ref(),
            gesture_embedding.as_ref(),
            &cues.lip_present,
            &cues.gesture_present,
            ctx,
        )?;
        let estimate = self.decoder.forward(&(latent * &mask)?, len)?;
        Ok(ModelOutput {
            estimate,
            mask,
            lip_embedding,
            gesture_embedding,
        })
    }

    /// Extracts the target speaker from a single mixture.
    ///
    /// At least one cue must be given and each given cue must cover the audio duration
    /// to within one video frame. A cue the model does not use is ignored; a cue the
    /// model uses but that is absent runs through its zeroed branch.
    pub fn extract(&self, mixture: &Waveform, lip: Option<&LipSequence>, gesture: Option<&PoseSequence>) -> Result<Waveform> {
        let out = self.run_single(mixture, lip, gesture, None)?;
        to_waveform(&out)
    }

    /// Like [`extract`](Self::extract) but with a caller-supplied mask `[T, N]`.
    pub fn extract_with_mask(&self, mixture: &Waveform, mask: &Tensor) -> Result<Waveform> {
        let wave = self.wave_tensor(mixture)?;
        let latent = self.encoder.forward(&wave)?;
        let mask = mask.to_dtype(self.dtype)?.unsqueeze(0)?;
        if mask.dims() != latent.dims() {
            return Err(Error::invalid(format!("mask {:?} does not match latent {:?}", mask.dims(), latent.dims())));
        }
        let est = self.decoder.forward(&(latent * mask)?, mixture.len())?;
        to_waveform(&est)
    }

    /// `decode(encode(x))`, no mask.
    pub fn reconstruct(&self, mixture: &Waveform) -> Result<Waveform> {
        let wave = self.wave_tensor(mixture)?;
        let latent = self.encoder.forward(&wave)?;
        to_waveform(&self.decoder.forward(&latent, mixture.len())?)
    }

    /// Single-utterance forward with explicit presence flags, for callers that need to
    /// feed a cue tensor while marking it missing.
    pub fn forward_single(
        &self,
        mixture: &Waveform,
        lip: Option<&LipSequence>,
        gesture: Option<&PoseSequence>,
        presence_override: Option<(bool, bool)>,
    ) -> Result<Waveform> {
        let out = self.run_single(mixture, lip, gesture, presence_override)?;
        to_waveform(&out)
    }

    fn wave_tensor(&self, mixture: &Waveform) -> Result<Tensor> {
        Ok(Tensor::from_slice(mixture.samples(), (1, mixture.len()), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn run_single(
        &self,
        mixture: &Waveform,
        lip: Option<&LipSequence>,
        gesture: Option<&PoseSequence>,
        presence_override: Option<(bool, bool)>,
    ) -> Result<Tensor> {
        if lip.is_none() && gesture.is_none() {
            return Err(Error::invalid("extraction needs at least one visual cue"));
        }
        if mixture.len() < self.cfg.codec.kernel {
            return Err(Error::invalid(format!("mixture of {} samples is shorter than one frame", mixture.len())));
        }
        let audio_secs = mixture.len() as f64 / SAMPLE_RATE as f64;
        let check = |frames: usize, what: &str| -> Result<()> {
            let secs = frames as f64 / VISUAL_FPS as f64;
            if (secs - audio_secs).abs() > 1.0 / VISUAL_FPS as f64 + 1e-9 {
                return Err(Error::invalid(format!(
                    "{what} covers {secs:.3} s but the audio lasts {audio_secs:.3} s"
                )));
            }
            Ok(())
        };
        if let Some(l) = lip {
            check(l.num_frames(), "lip sequence")?;
        }
        if let Some(g) = gesture {
            check(g.num_frames(), "pose sequence")?;
        }
        let (lip_present, gesture_present) = presence_override.unwrap_or((lip.is_some(), gesture.is_some()));
        let use_lip = self.cfg.cues.uses_lip() && lip.is_some();
        let use_gesture = self.cfg.cues.uses_gesture() && gesture.is_some();
        let wave = self.wave_tensor(mixture)?;
        let mut ctx = Ctx::eval();
        let latent = self.encoder.forward(&wave)?;
        let lip_emb = match (use_lip, lip, &self.lip_encoder) {
            (true, Some(l), Some(enc)) => Some(enc.forward(&lip_tensor(l, self.dtype)?.unsqueeze(0)?)?),
            _ => None,
        };
        let gesture_emb = match (use_gesture, gesture, &self.gesture_encoder) {
            (true, Some(g), Some(enc)) => Some(enc.forward(&pose_tensor(g, self.dtype)?.unsqueeze(0)?, &mut ctx)?),
            _ => None,
        };
        let mask = if lip_emb.is_none() && gesture_emb.is_none() {
            // None of the model's cues is available: every used branch is zero.
            self.estimate_mask_without_cues(&latent, &mut ctx)?
        } else {
            self.estimate_mask(
                &latent,
                lip_emb.as_ref(),
                gesture_emb.as_ref(),
                &[lip_present && use_lip],
                &[gesture_present && use_gesture],
                &mut ctx,
            )?
        };
        let est = self.decoder.forward(&(latent * mask)?, mixture.len())?;
        fit_length(&est, mixture.len())
    }

    /// Mask when every cue branch the model uses is zero.
    fn estimate_mask_without_cues(&self, latent: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (b, _, _) = latent.dims3()?;
        let device = latent.device();
        match &self.fusion {
            FusionStack::Attention { .. } => {
                let mut stream = self.project_mixture(latent)?;
                for block in &self.blocks {
                    stream = block.forward(&stream, ctx)?;
                }
                Ok(self.mask_head.forward(&stream)?.relu()?)
            }
            FusionStack::Concatenation { .. } => {
                let zeros_lip = Tensor::zeros((b, 1, self.cfg.lip.out_dim), self.dtype, device)?;
                let zeros_gesture = Tensor::zeros((b, 1, self.cfg.gesture.output_dim()), self.dtype, device)?;
                let absent = vec![false; b];
                self.estimate_mask(
                    latent,
                    Some(&zeros_lip),
                    Some(&zeros_gesture),
                    &absent,
                    &absent,
                    ctx,
                )
            }
        }
    }

    /// Parameter-name prefixes of each trainable group.
    pub fn parameter_groups(&self) -> Vec<&'static str> {
        let mut groups = vec!["speech_encoder.", "speech_decoder.", "separator."];
        if self.lip_encoder.is_some() {
            groups.push("lip_encoder.");
        }
        if self.gesture_encoder.is_some() {
            groups.push("gesture_encoder.");
        }
        groups
    }
}

fn to_waveform(est: &Tensor) -> Result<Waveform> {
    let samples: Vec<f32> = est.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?;
    Waveform::new(samples)
}

impl CueSet {
    /// Presence flags as the model sees them for a sample that carries `has_lip` / `has_gesture`.
    pub fn effective(self, has_lip: bool, has_gesture: bool) -> (bool, bool) {
        (self.uses_lip() && has_lip, self.uses_gesture() && has_gesture)
    }
}
