use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamStore};
use crate::error::Result;

/// Forward-pass state: train/eval switch plus the RNG that drives dropout.
#[derive(Debug, Clone)]
pub struct Ctx {
    training: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Inverted dropout with a mask drawn from this context's RNG. Identity in eval mode.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.training || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let scale = (1.0 / keep) as f32;
        // Keep when a 32-bit draw falls below keep * 2^32.
        let threshold = (keep * 4_294_967_296.0).min(u32::MAX as f64) as u32;
        let mut bits = vec![0u32; x.elem_count()];
        self.rng.fill(bits.as_mut_slice());
        let mask: Vec<f32> = bits.iter().map(|&b| if b < threshold { scale } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// Affine map on the last axis. Weight is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.get(&format!("{name}.weight"), &[input, output], Init::Uniform(bound))?;
        let bias = if bias {
            Some(store.get(&format!("{name}.bias"), &[output], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out_shape = x.dims().to_vec();
        let input = out_shape.pop().unwrap_or(1);
        let rows = x.elem_count() / input.max(1);
        let y = x.reshape((rows, input))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => (y + expand_rows(b, rows)?)?,
            None => y,
        };
        out_shape.push(self.out_dim());
        Ok(y.reshape(out_shape)?)
    }
}

/// Repeats a `[D]` vector into `[rows, D]` through a rank-one product, so the
/// gradient back to the vector is a matmul rather than a strided reduction.
pub(crate) fn expand_rows(v: &Tensor, rows: usize) -> Result<Tensor> {
    let ones = Tensor::ones((rows, 1), v.dtype(), v.device())?;
    Ok(ones.matmul(&v.reshape((1, ()))?)?)
}

/// Layer normalization over the last axis with a learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.get(&format!("{name}.gain"), &[dim], Init::Ones)?,
            shift: store.get(&format!("{name}.shift"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = self.gain.elem_count();
        let rows = x.elem_count() / dim;
        let flat = x.reshape((rows, dim))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = ((normed * expand_rows(&self.gain, rows)?)? + expand_rows(&self.shift, rows)?)?;
        Ok(y.reshape(x.shape())?)
    }
}

/// Stable log-softmax over the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}
