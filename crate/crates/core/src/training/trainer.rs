use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{assemble, DEFAULT_LIP_SIZE, random_crop, secs_to_quantum, Batch, SampleSource};
use super::optim::{clip_global_norm, AdamW};
use super::schedule::{LrSchedule, TrainConfig};
use crate::datasim::MixtureSample;
use crate::error::{Error, Result};
use crate::losses::{si_snr_batch, total_loss};
use crate::nn::{Ctx, ParamStore};
use crate::separator::{save_checkpoint, Checkpoint, CueBatch, Fusion, ModelConfig, SelgModel, VariantSpec};
use crate::visual::LipEncoder;

/// Frozen lip encoder of a lip-only model. Supplies the alignment targets for models
/// that see gestures but no lips.
#[derive(Debug, Clone)]
pub struct LipTeacher {
    encoder: LipEncoder,
}

impl LipTeacher {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if !ckpt.config.cues.uses_lip() {
            return Err(Error::invalid("lip teacher needs a checkpoint with a lip encoder"));
        }
        let mut frozen = ckpt.store.detached();
        let encoder = LipEncoder::new(&mut frozen, "lip_encoder", ckpt.config.lip.clone())?;
        Ok(Self { encoder })
    }

    /// `[B, F, H, W]` to `[B, F, D]`, no gradient.
    pub fn embed(&self, lips: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.forward(lips)?.detach())
    }
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub si_snr_loss: f64,
    pub info_nce: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One line of the epoch log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub bvl: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepReport>,
    /// Parameters at the epoch with the lowest validation loss.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Path of the retained checkpoint when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Optimizer, schedule and model for one training run.
pub struct Trainer {
    variant: VariantSpec,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    store: ParamStore,
    model: SelgModel,
    vars: Vec<Var>,
    opt: AdamW,
    schedule: LrSchedule,
    step: usize,
    teacher: Option<LipTeacher>,
}

impl Trainer {
    /// Fresh model initialised from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, variant: VariantSpec, cfg: TrainConfig, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(dtype, cfg.seed);
        Self::from_store(model_cfg, store, variant, cfg)
    }

    /// Continues from existing parameters with a fresh optimizer and schedule.
    pub fn from_store(model_cfg: ModelConfig, mut store: ParamStore, variant: VariantSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        variant.validate()?;
        if !model_cfg.supports(variant) {
            return Err(Error::invalid(format!(
                "model layout {:?}/{:?} cannot train variant {}",
                model_cfg.cues,
                model_cfg.fusion,
                variant.label()
            )));
        }
        let model = SelgModel::new(model_cfg.clone(), &mut store)?;
        let vars = store.vars();
        let opt = AdamW::new(vars.clone(), cfg.weight_decay)?;
        let schedule = LrSchedule::new(&cfg, model_cfg.fusion == Fusion::Attention);
        Ok(Self { variant, cfg, model_cfg, store, model, vars, opt, schedule, step: 0, teacher: None })
    }

    /// Alignment targets from a frozen lip-only model, for gesture-only variants.
    pub fn with_teacher(mut self, teacher: LipTeacher) -> Self {
        self.teacher = Some(teacher);
        self
    }

    pub fn variant(&self) -> VariantSpec {
        self.variant
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn model(&self) -> &SelgModel {
        &self.model
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    /// Optimizer steps taken so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn alignment_lip(&self, lip_embedding: Option<&Tensor>, cues: &CueBatch) -> Result<Option<Tensor>> {
        if !self.variant.use_infonce {
            return Ok(None);
        }
        if self.variant.cues.uses_lip() {
            return Ok(lip_embedding.cloned());
        }
        let teacher = self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::invalid("gesture-only alignment training needs a lip teacher"))?;
        let lips = cues.lips.as_ref().ok_or_else(|| Error::invalid("batch carries no lip frames"))?;
        Ok(Some(teacher.embed(lips)?))
    }

    /// One optimizer step over `micro` physical batches. Each batch's loss is weighted by
    /// its share of the step's samples, so the update matches one big batch.
    pub fn step(&mut self, micro: &[Batch]) -> Result<StepReport> {
        let total: usize = micro.iter().map(Batch::len).sum();
        if total == 0 {
            return Err(Error::invalid("optimizer step without samples"));
        }
        let next = self.step + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vars.len()];
        let (mut loss_sum, mut snr_sum, mut nce_sum) = (0.0, 0.0, None::<f64>);
        for (k, batch) in micro.iter().enumerate() {
            let weight = batch.len() as f64 / total as f64;
            let mut ctx = Ctx::train(dropout_seed(self.cfg.seed, next, k));
            let out = self.model.forward(&batch.mixture, &batch.cues, &mut ctx)?;
            let lip = self.alignment_lip(out.lip_embedding.as_ref(), &batch.cues)?;
            let terms = total_loss(
                &batch.target,
                &out.estimate,
                lip.as_ref(),
                out.gesture_embedding.as_ref(),
                &batch.both_present(),
                &self.cfg.loss,
                self.variant.use_infonce,
            )?;
            let loss = scalar(&terms.total)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: next, ids: batch.ids.clone() });
            }
            loss_sum += weight * loss;
            snr_sum += weight * scalar(&terms.si_snr_loss)?;
            if let Some(n) = &terms.info_nce {
                *nce_sum.get_or_insert(0.0) += weight * scalar(n)?;
            }
            let store = (terms.total * weight)?.backward()?;
            for (acc, var) in grads.iter_mut().zip(&self.vars) {
                if let Some(g) = store.get(var.as_tensor()) {
                    let g = g.detach();
                    *acc = Some(match acc.take() {
                        Some(prev) => (prev + g)?,
                        None => g,
                    });
                }
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: next, ids: micro.iter().flat_map(|b| b.ids.clone()).collect() });
        }
        let lr = self.schedule.lr(next);
        self.opt.step(&grads, lr)?;
        self.step = next;
        Ok(StepReport { step: next, lr, loss: loss_sum, si_snr_loss: snr_sum, info_nce: nce_sum, grad_norm })
    }

    /// Negative mean SI-SNR over `samples` in eval mode. Clips are cut to the
    /// validation length when one is configured.
    pub fn validation_loss(&self, samples: &dyn SampleSource) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::invalid("validation set is empty"));
        }
        let limit = self.cfg.val_secs.map(secs_to_quantum).unwrap_or(secs_to_quantum(self.cfg.max_clip_secs));
        let mut frozen = self.store.detached();
        let model = SelgModel::new(self.model_cfg.clone(), &mut frozen)?;
        let dtype = self.store.dtype();
        let mut sum = 0.0;
        for i in 0..samples.len() {
            let s = samples.get(i)?.truncated(limit);
            let batch = assemble(std::slice::from_ref(&s), DEFAULT_LIP_SIZE, dtype)?;
            let out = model.forward(&batch.mixture, &batch.cues, &mut Ctx::eval())?;
            sum += scalar(&si_snr_batch(&batch.target, &out.estimate, self.cfg.loss.eps)?.sum_all()?)?;
        }
        Ok(-sum / samples.len() as f64)
    }

    /// Samples for one optimizer step: loaded, then cropped or cut to the clip limit.
    fn load_step(&self, source: &dyn SampleSource, indices: &[usize], epoch: usize) -> Result<Vec<MixtureSample>> {
        let crop = self.cfg.crop_secs.map(secs_to_quantum);
        let limit = secs_to_quantum(self.cfg.max_clip_secs);
        let seed = self.cfg.seed;
        let load = |&i: &usize| -> Result<MixtureSample> {
            let s = source.get(i)?;
            match crop {
                Some(len) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(crop_seed(seed, epoch, i));
                    random_crop(&s, len.min(limit), &mut rng)
                }
                None => Ok(s.truncated(limit)),
            }
        };
        if self.cfg.deterministic {
            indices.iter().map(load).collect()
        } else {
            indices.par_iter().map(load).collect()
        }
    }

    /// Epoch loop with plateau halving, early stopping and best-model retention.
    ///
    /// With `out_dir`, writes `train_log.jsonl` (one line per epoch), `steps.jsonl`
    /// (one line per optimizer step) and `best.ckpt`.
    pub fn fit(&mut self, train: &dyn SampleSource, val: &dyn SampleSource, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut logs = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some((JsonLines::create(&dir.join("train_log.jsonl"))?, JsonLines::create(&dir.join("steps.jsonl"))?))
            }
            None => None,
        };
        let dtype = self.store.dtype();
        let mut epochs = Vec::new();
        let mut steps = Vec::new();
        let mut best = self.store.deep_clone()?;
        let mut best_epoch = 0;
        let mut stopped_early = false;
        let mut checkpoint = None;
        'epochs: for epoch in 1..=self.cfg.max_epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9)));
            let mut epoch_loss = 0.0;
            let mut epoch_steps = 0;
            let mut budget_spent = false;
            for chunk in order.chunks(self.cfg.effective_batch) {
                let samples = self.load_step(train, chunk, epoch)?;
                let micro = samples
                    .chunks(self.cfg.physical_batch)
                    .map(|c| assemble(c, DEFAULT_LIP_SIZE, dtype))
                    .collect::<Result<Vec<_>>>()?;
                let report = self.step(&micro)?;
                log::debug!("step {} loss {:.4} lr {:.2e}", report.step, report.loss, report.lr);
                if let Some((_, step_log)) = &mut logs {
                    step_log.write(&report)?;
                }
                epoch_loss += report.loss;
                epoch_steps += 1;
                steps.push(report);
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    budget_spent = true;
                    break;
                }
            }
            let val_loss = self.validation_loss(val)?;
            let lr = self.schedule.lr(self.step.max(1));
            if self.schedule.observe(val_loss) {
                best = self.store.deep_clone()?;
                best_epoch = epoch;
                if let Some(dir) = out_dir {
                    let path = dir.join("best.ckpt");
                    let meta = serde_json::json!({
                        "variant": self.variant,
                        "epoch": epoch,
                        "step": self.step,
                        "val_loss": val_loss,
                        "train": self.cfg,
                    });
                    save_checkpoint(&path, &self.model_cfg, &best, meta)?;
                    checkpoint = Some(path);
                }
            }
            let record = EpochRecord {
                epoch,
                step: self.step,
                lr,
                train_loss: epoch_loss / epoch_steps.max(1) as f64,
                val_loss,
                bvl: self.schedule.best().unwrap_or(val_loss),
            };
            log::info!(
                "epoch {epoch} step {} train {:.4} val {:.4} bvl {:.4} lr {:.2e}",
                record.step,
                record.train_loss,
                record.val_loss,
                record.bvl,
                record.lr
            );
            if let Some((epoch_log, _)) = &mut logs {
                epoch_log.write(&record)?;
            }
            epochs.push(record);
            if self.schedule.should_stop() {
                stopped_early = true;
                break 'epochs;
            }
            if budget_spent {
                break 'epochs;
            }
        }
        Ok(TrainOutcome {
            best_val_loss: self.schedule.best().unwrap_or(f64::INFINITY),
            epochs,
            steps,
            best,
            best_epoch,
            stopped_early,
            checkpoint,
        })
    }
}

/// Starts the alignment-loss stage from a checkpoint trained without it. Optimizer and
/// schedule start over; `variant` must enable the alignment loss and match the
/// checkpoint's layout.
pub fn finetune_infonce(base: &Checkpoint, variant: VariantSpec, cfg: TrainConfig) -> Result<Trainer> {
    if !variant.use_infonce {
        return Err(Error::invalid(format!("{} does not use the alignment loss", variant.label())));
    }
    if !base.config.supports(variant) {
        return Err(Error::invalid(format!(
            "checkpoint layout {:?}/{:?} does not match {}",
            base.config.cues,
            base.config.fusion,
            variant.label()
        )));
    }
    if base.meta.pointer("/variant/use_infonce").and_then(|v| v.as_bool()) == Some(true) {
        return Err(Error::invalid("base checkpoint was already trained with the alignment loss"));
    }
    let store = base.store.deep_clone()?;
    Trainer::from_store(base.config.clone(), store, variant, cfg)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn dropout_seed(seed: u64, step: usize, micro: usize) -> u64 {
    mix(mix(seed, step as u64), micro as u64 + 1)
}

fn crop_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    mix(mix(seed ^ 0xC0, epoch as u64), index as u64)
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value)?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}
