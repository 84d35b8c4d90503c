use candle_core::Tensor;

use super::config::SeparatorConfig;
use crate::error::Result;
use crate::nn::{Blstm, Ctx, LayerNorm, Linear, ParamStore};

/// Number of half-overlapping chunks of length `chunk` needed to cover `frames`.
pub fn chunk_count(frames: usize, chunk: usize) -> usize {
    let hop = chunk / 2;
    if frames <= chunk {
        1
    } else {
        (frames - chunk).div_ceil(hop) + 1
    }
}

/// Frames after zero-padding the tail so the last chunk is full.
pub fn padded_length(frames: usize, chunk: usize) -> usize {
    (chunk_count(frames, chunk) - 1) * (chunk / 2) + chunk
}

/// `[B, T, D]` to `[B, S, K, D]` half-overlapping chunks, zero-padding the tail.
pub fn segment(x: &Tensor, chunk: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    let hop = chunk / 2;
    let s = chunk_count(t, chunk);
    let padded = x.pad_with_zeros(1, 0, padded_length(t, chunk) - t)?;
    let hops = padded.reshape((b, s + 1, hop, d))?;
    Ok(Tensor::cat(&[hops.narrow(1, 0, s)?, hops.narrow(1, 1, s)?], 2)?)
}

/// Overlap-add of `[B, S, K, D]` chunks back to `[B, frames, D]`.
pub fn merge(chunks: &Tensor, frames: usize) -> Result<Tensor> {
    let (b, s, k, d) = chunks.dims4()?;
    let hop = k / 2;
    let first = chunks.narrow(2, 0, hop)?.pad_with_zeros(1, 0, 1)?;
    let second = chunks.narrow(2, hop, hop)?.pad_with_zeros(1, 1, 0)?;
    let joined = (first + second)?.reshape((b, (s + 1) * hop, d))?;
    Ok(joined.narrow(1, 0, frames)?)
}

/// One intra-chunk plus one inter-chunk BLSTM pass, each projected back to the model
/// width, layer-normalized and added to its input.
#[derive(Debug, Clone)]
pub struct DualPath {
    chunk: usize,
    intra: Blstm,
    intra_proj: Linear,
    intra_norm: LayerNorm,
    inter: Blstm,
    inter_proj: Linear,
    inter_norm: LayerNorm,
}

impl DualPath {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SeparatorConfig) -> Result<Self> {
        let d = cfg.dp_input;
        let h = cfg.dp_hidden;
        Ok(Self {
            chunk: cfg.chunk,
            intra: Blstm::new(store, &format!("{name}.intra"), d, h, 1, 0.0)?,
            intra_proj: Linear::new(store, &format!("{name}.intra_proj"), 2 * h, d, true)?,
            intra_norm: LayerNorm::new(store, &format!("{name}.intra_norm"), d)?,
            inter: Blstm::new(store, &format!("{name}.inter"), d, h, 1, 0.0)?,
            inter_proj: Linear::new(store, &format!("{name}.inter_proj"), 2 * h, d, true)?,
            inter_norm: LayerNorm::new(store, &format!("{name}.inter_norm"), d)?,
        })
    }

    /// `[B, T, D]` to `[B, T, D]`.
    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let chunks = segment(x, self.chunk)?;
        let (_, s, k, _) = chunks.dims4()?;

        let rows = chunks.reshape((b * s, k, d))?;
        let intra = self.intra.forward(&rows, ctx)?;
        let intra = self.intra_norm.forward(&self.intra_proj.forward(&intra)?)?;
        let chunks = (chunks + intra.reshape((b, s, k, d))?)?;

        let cols = chunks.transpose(1, 2)?.contiguous()?.reshape((b * k, s, d))?;
        let inter = self.inter.forward(&cols, ctx)?;
        let inter = self.inter_norm.forward(&self.inter_proj.forward(&inter)?)?;
        let inter = inter.reshape((b, k, s, d))?.transpose(1, 2)?;
        let chunks = (chunks + inter)?;

        merge(&chunks, t)
    }
}
