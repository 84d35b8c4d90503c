//! Scale-invariant SNR and the gesture-to-lip contrastive alignment loss.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::nn::log_softmax_last;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature of the alignment loss.
    pub kappa: f64,
    pub eps: f64,
    pub infonce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kappa: 0.07, eps: 1e-8, infonce_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !self.infonce_weight.is_finite() {
            return Err(Error::Config("infonce_weight must be finite".into()));
        }
        Ok(())
    }
}

/// SI-SNR in dB of `estimate` against `reference`, computed in f64.
pub fn si_snr(reference: &Waveform, estimate: &Waveform, eps: f64) -> Result<f64> {
    si_snr_slice(reference.samples(), estimate.samples(), eps)
}

pub fn si_snr_slice(reference: &[f32], estimate: &[f32], eps: f64) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "si_snr length mismatch: {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    let energy: f64 = reference.iter().map(|&x| (x as f64) * (x as f64)).sum();
    if energy == 0.0 {
        return Err(Error::invalid("si_snr reference is identically zero"));
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(&s, &e)| s as f64 * e as f64).sum();
    let alpha = dot / energy;
    let mut target = 0.0;
    let mut noise = 0.0;
    for (&s, &e) in reference.iter().zip(estimate) {
        let t = alpha * s as f64;
        let n = e as f64 - t;
        target += t * t;
        noise += n * n;
    }
    Ok(20.0 * (target.sqrt() / (noise.sqrt() + eps) + eps).log10())
}

/// Per-row SI-SNR in dB for `[B, len]` tensors, differentiable w.r.t. `estimate`.
pub fn si_snr_batch(reference: &Tensor, estimate: &Tensor, eps: f64) -> Result<Tensor> {
    if reference.dims() != estimate.dims() {
        return Err(Error::invalid(format!(
            "si_snr shape mismatch: {:?} vs {:?}",
            reference.dims(),
            estimate.dims()
        )));
    }
    let reference = reference.detach();
    let energy = reference.sqr()?.sum_keepdim(D::Minus1)?;
    let energies: Vec<f64> = energy.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if let Some(i) = energies.iter().position(|&e| e == 0.0) {
        return Err(Error::invalid(format!("si_snr reference of row {i} is identically zero")));
    }
    let alpha = (estimate * &reference)?.sum_keepdim(D::Minus1)?.div(&energy)?;
    let target = reference.broadcast_mul(&alpha)?;
    let noise = (estimate - &target)?;
    let target_norm = target.sqr()?.sum(D::Minus1)?.sqrt()?;
    let noise_norm = (noise.sqr()?.sum(D::Minus1)?.sqrt()? + eps)?;
    let ratio = ((target_norm / noise_norm)? + eps)?;
    Ok((ratio.log()? * (20.0 / std::f64::consts::LN_10))?)
}

/// Negative SI-SNR averaged over the batch.
pub fn si_snr_loss(reference: &Tensor, estimate: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(si_snr_batch(reference, estimate, eps)?.mean_all()?.neg()?)
}

/// Per-utterance alignment loss `[B]` for lip `[B, T, D]` and gesture `[B, T, D]` embeddings.
///
/// Row `i` of the gesture sequence must pick out lip frame `i` among all lip frames of
/// the same utterance. Lip embeddings act as constants.
pub fn info_nce_batch(lip: &Tensor, gesture: &Tensor, kappa: f64) -> Result<Tensor> {
    if lip.dims() != gesture.dims() {
        return Err(Error::invalid(format!(
            "info_nce shape mismatch: lip {:?} vs gesture {:?}",
            lip.dims(),
            gesture.dims()
        )));
    }
    let (_, t, _) = lip.dims3()?;
    if t == 0 {
        return Err(Error::invalid("info_nce needs at least one frame"));
    }
    let lip = lip.detach();
    let scores = (gesture.matmul(&lip.transpose(1, 2)?.contiguous()?)? / kappa)?;
    let log_probs = log_softmax_last(&scores)?;
    let eye = Tensor::eye(t, log_probs.dtype(), log_probs.device())?;
    Ok(log_probs.broadcast_mul(&eye)?.sum((1, 2))?.neg()?)
}

/// Alignment loss for one utterance, `[T, D]` inputs.
pub fn info_nce(lip: &Tensor, gesture: &Tensor, kappa: f64) -> Result<Tensor> {
    if lip.rank() != 2 || gesture.rank() != 2 {
        return Err(Error::invalid("info_nce expects [T, D] embeddings"));
    }
    Ok(info_nce_batch(&lip.unsqueeze(0)?, &gesture.unsqueeze(0)?, kappa)?.squeeze(0)?)
}

/// Loss value and its parts.
#[derive(Debug)]
pub struct LossTerms {
    pub total: Tensor,
    pub si_snr_loss: Tensor,
    pub info_nce: Option<Tensor>,
}

/// Batch objective: negative SI-SNR plus, when enabled, the weighted alignment loss.
/// Rows flagged in `both_present = false` contribute zero alignment loss; both terms
/// are averaged over all rows.
pub fn total_loss(
    reference: &Tensor,
    estimate: &Tensor,
    lip: Option<&Tensor>,
    gesture: Option<&Tensor>,
    both_present: &[bool],
    cfg: &LossConfig,
    use_infonce: bool,
) -> Result<LossTerms> {
    let si_snr_loss = si_snr_loss(reference, estimate, cfg.eps)?;
    if !use_infonce {
        return Ok(LossTerms { total: si_snr_loss.clone(), si_snr_loss, info_nce: None });
    }
    let (lip, gesture) = match (lip, gesture) {
        (Some(l), Some(g)) => (l, g),
        _ => return Err(Error::invalid("alignment loss needs both lip and gesture embeddings")),
    };
    let b = both_present.len();
    if b != reference.dim(0)? {
        return Err(Error::invalid("presence rows do not match the batch"));
    }
    let per_row = info_nce_batch(lip, gesture, cfg.kappa)?;
    let mask: Vec<f32> = both_present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, b, &Device::Cpu)?.to_dtype(per_row.dtype())?;
    let nce = (per_row * mask)?.mean_all()?;
    let total = (&si_snr_loss + (&nce * cfg.infonce_weight)?)?;
    Ok(LossTerms { total, si_snr_loss, info_nce: Some(nce) })
}
