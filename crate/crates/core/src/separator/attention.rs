use candle_core::Tensor;

use super::config::SeparatorConfig;
use crate::error::{Error, Result};
use crate::nn::{softmax_last, Ctx, LayerNorm, Linear, ParamStore};

/// Intermediate values of one cross-attention pass.
#[derive(Debug)]
pub struct AttentionTrace {
    /// Softmax weights `[B, heads, T_query, T_key]`.
    pub weights: Tensor,
    /// Multi-head attention output after the output projection, before the residual.
    pub attended: Tensor,
    /// Final layer output.
    pub output: Tensor,
}

/// Transformer cross-attention layer: queries from a visual stream, keys and values
/// from the mixture stream, post-norm residual around attention and around the FFN.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm_attn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm_ffn: LayerNorm,
    heads: usize,
    dropout: f64,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SeparatorConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, true)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, true)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true)?,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, cfg.ffn_dim, true)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_dim, d, true)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d)?,
            heads: cfg.heads,
            dropout: cfg.attn_dropout,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.query.out_dim() / self.heads
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn trace(&self, visual: &Tensor, mixture: &Tensor, ctx: &mut Ctx) -> Result<AttentionTrace> {
        let (b, t, d) = visual.dims3()?;
        let (bm, tm, dm) = mixture.dims3()?;
        if (b, t, d) != (bm, tm, dm) {
            return Err(Error::invalid(format!(
                "cross-attention streams differ: visual {:?} vs mixture {:?}",
                visual.dims(),
                mixture.dims()
            )));
        }
        // Scaling the queries is cheaper than scaling the [T, T] scores.
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let q = self.split_heads(&(self.query.forward(visual)? * scale)?)?;
        let k = self.split_heads(&self.key.forward(mixture)?)?;
        let v = self.split_heads(&self.value.forward(mixture)?)?;
        let scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
        let weights = softmax_last(&scores)?;
        let dropped = ctx.dropout(&weights, self.dropout)?;
        let heads = dropped.matmul(&v)?;
        let merged = heads.transpose(1, 2)?.reshape((b, t, d))?;
        let attended = self.out.forward(&merged)?;
        let x = self.norm_attn.forward(&(visual + ctx.dropout(&attended, self.dropout)?)?)?;
        let ff = self.ffn_out.forward(&self.ffn_in.forward(&x)?.relu()?)?;
        let output = self.norm_ffn.forward(&(&x + ctx.dropout(&ff, self.dropout)?)?)?;
        Ok(AttentionTrace { weights, attended, output })
    }

    /// `visual, mixture: [B, T, D]` to `[B, T, D]`.
    pub fn forward(&self, visual: &Tensor, mixture: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        Ok(self.trace(visual, mixture, ctx)?.output)
    }
}

/// Element-wise sum of the attended cue branches that are present. An absent branch
/// contributes nothing, which is the same as adding an all-zero sequence.
pub fn fuse(lip: Option<&Tensor>, gesture: Option<&Tensor>) -> Result<Tensor> {
    match (lip, gesture) {
        (Some(l), Some(g)) => {
            if l.dims() != g.dims() {
                return Err(Error::invalid(format!(
                    "fused branches differ in shape: {:?} vs {:?}",
                    l.dims(),
                    g.dims()
                )));
            }
            Ok((l + g)?)
        }
        (Some(l), None) => Ok(l.clone()),
        (None, Some(g)) => Ok(g.clone()),
        (None, None) => Err(Error::invalid("fusion needs at least one cue branch")),
    }
}
