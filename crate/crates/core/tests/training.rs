use candle_core::{DType, Tensor};
use serde_json::json;

use selg::datasim::{generate_split, MissingPolicy, MixtureSample, SimConfig, Split, SplitCounts};
use selg::separator::{load_checkpoint, save_checkpoint, ModelConfig, VariantSpec};
use selg::training::{assemble, finetune_infonce, TrainConfig, Trainer, DEFAULT_LIP_SIZE};
use selg::Error;

fn clips(n: usize, missing: MissingPolicy) -> Vec<MixtureSample> {
    let sim = SimConfig {
        counts: SplitCounts { train: n, val: 0, test: 0 },
        duration: [0.4, 0.4],
        missing,
        ..SimConfig::default()
    };
    generate_split(&sim, Split::Train).unwrap()
}

/// A small model without dropout so micro-batch splits see identical forward passes.
fn quiet_model(variant: VariantSpec) -> ModelConfig {
    let mut cfg = ModelConfig::desk(variant);
    cfg.separator.attn_dropout = 0.0;
    cfg.separator.repeats = 1;
    cfg.gesture.dropout = 0.0;
    cfg.gesture.layers = 2;
    cfg
}

fn params(trainer: &Trainer) -> Vec<(String, Vec<f64>)> {
    trainer
        .store()
        .named_vars()
        .map(|(n, v)| (n.to_string(), v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()))
        .collect()
}

fn max_diff(a: &[(String, Vec<f64>)], b: &[(String, Vec<f64>)]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for ((na, va), (nb, vb)) in a.iter().zip(b) {
        assert_eq!(na, nb);
        for (x, y) in va.iter().zip(vb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

#[test]
fn accumulated_micro_batches_match_one_batch() {
    let variant = VariantSpec::BOTH_ATTENTION;
    let samples = clips(4, MissingPolicy::default());
    let cfg = TrainConfig { effective_batch: 4, physical_batch: 4, warmup_steps: 0, ..TrainConfig::desk() };
    let split = TrainConfig { physical_batch: 2, ..cfg.clone() };
    let mut whole = Trainer::new(quiet_model(variant), variant, cfg, DType::F64).unwrap();
    let mut parts = Trainer::new(quiet_model(variant), variant, split, DType::F64).unwrap();
    let full = assemble(&samples, DEFAULT_LIP_SIZE, DType::F64).unwrap();
    let halves = [
        assemble(&samples[..2], DEFAULT_LIP_SIZE, DType::F64).unwrap(),
        assemble(&samples[2..], DEFAULT_LIP_SIZE, DType::F64).unwrap(),
    ];
    for _ in 0..2 {
        let a = whole.step(std::slice::from_ref(&full)).unwrap();
        let b = parts.step(&halves).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-9, "{} vs {}", a.loss, b.loss);
    }
    let diff = max_diff(&params(&whole), &params(&parts));
    assert!(diff < 1e-5, "parameters differ by {diff}");
}

#[test]
fn zero_weight_alignment_stage_equals_plain_training() {
    let base_variant = VariantSpec::BOTH_ATTENTION;
    let samples = clips(2, MissingPolicy::NONE);
    let batch = assemble(&samples, DEFAULT_LIP_SIZE, DType::F64).unwrap();
    let cfg = TrainConfig { effective_batch: 2, physical_batch: 2, warmup_steps: 0, ..TrainConfig::desk() };
    let mut base = Trainer::new(quiet_model(base_variant), base_variant, cfg.clone(), DType::F64).unwrap();
    base.step(std::slice::from_ref(&batch)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    save_checkpoint(&path, base.model_config(), base.store(), json!({ "variant": base_variant })).unwrap();
    let ckpt = load_checkpoint(&path, DType::F64).unwrap();

    let mut zero = cfg.clone();
    zero.loss.infonce_weight = 0.0;
    let mut tuned = finetune_infonce(&ckpt, VariantSpec::BOTH_ATTENTION_INFONCE, zero).unwrap();
    let mut plain = Trainer::from_store(ckpt.config.clone(), ckpt.store.deep_clone().unwrap(), base_variant, cfg).unwrap();
    for _ in 0..2 {
        let a = tuned.step(std::slice::from_ref(&batch)).unwrap();
        let b = plain.step(std::slice::from_ref(&batch)).unwrap();
        assert!(a.info_nce.is_some());
        assert_eq!(a.si_snr_loss, b.si_snr_loss);
    }
    assert_eq!(max_diff(&params(&tuned), &params(&plain)), 0.0);
}

#[test]
fn alignment_stage_rejects_wrong_bases() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lip.ckpt");
    let trainer = Trainer::new(quiet_model(VariantSpec::LIP_CONCAT), VariantSpec::LIP_CONCAT, TrainConfig::desk(), DType::F32).unwrap();
    save_checkpoint(&path, trainer.model_config(), trainer.store(), json!({ "variant": VariantSpec::LIP_CONCAT })).unwrap();
    let ckpt = load_checkpoint(&path, DType::F32).unwrap();
    assert!(finetune_infonce(&ckpt, VariantSpec::BOTH_ATTENTION_INFONCE, TrainConfig::desk()).is_err());
    assert!(finetune_infonce(&ckpt, VariantSpec::LIP_CONCAT, TrainConfig::desk()).is_err());

    let path = dir.path().join("tuned.ckpt");
    let v = VariantSpec::BOTH_ATTENTION_INFONCE;
    let trainer = Trainer::new(quiet_model(v), v, TrainConfig::desk(), DType::F32).unwrap();
    save_checkpoint(&path, trainer.model_config(), trainer.store(), json!({ "variant": v })).unwrap();
    let ckpt = load_checkpoint(&path, DType::F32).unwrap();
    assert!(finetune_infonce(&ckpt, v, TrainConfig::desk()).is_err());
}

#[test]
fn non_finite_input_aborts_with_sample_ids() {
    let variant = VariantSpec::LIP_CONCAT;
    let samples = clips(2, MissingPolicy::NONE);
    let mut batch = assemble(&samples, DEFAULT_LIP_SIZE, DType::F32).unwrap();
    let (b, len) = batch.mixture.dims2().unwrap();
    let mut values: Vec<f32> = batch.mixture.flatten_all().unwrap().to_vec1().unwrap();
    values[len + 5] = f32::NAN;
    batch.mixture = Tensor::from_vec(values, (b, len), batch.mixture.device()).unwrap();
    let cfg = TrainConfig { effective_batch: 2, physical_batch: 2, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(quiet_model(variant), variant, cfg, DType::F32).unwrap();
    let before = params(&trainer);
    match trainer.step(std::slice::from_ref(&batch)) {
        Err(Error::NonFiniteLoss { step, ids }) => {
            assert_eq!(step, 1);
            assert_eq!(ids, batch.ids);
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
    assert_eq!(trainer.steps_taken(), 0);
    assert_eq!(max_diff(&before, &params(&trainer)), 0.0);
}

#[test]
fn flat_validation_halves_then_stops() {
    let variant = VariantSpec::LIP_CONCAT;
    let train = clips(2, MissingPolicy::NONE);
    let val = train[..1].to_vec();
    // A rate this small leaves every f32 parameter unchanged, so validation never improves.
    let cfg = TrainConfig {
        lr: 1e-30,
        effective_batch: 2,
        physical_batch: 2,
        crop_secs: Some(0.4),
        deterministic: true,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(quiet_model(variant), variant, cfg, DType::F32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = trainer.fit(&train, &val, Some(dir.path())).unwrap();
    assert!(outcome.stopped_early);
    assert_eq!(outcome.epochs.len(), 11);
    assert_eq!(outcome.best_epoch, 1);
    assert_eq!(trainer.schedule().halvings(), 1);
    assert_eq!(outcome.epochs[7].lr, 0.5e-30);
    assert!(outcome.epochs.iter().all(|e| e.val_loss == outcome.best_val_loss));

    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 11);
    let steps = std::fs::read_to_string(dir.path().join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 11);
    let ckpt = load_checkpoint(&dir.path().join("best.ckpt"), DType::F32).unwrap();
    assert_eq!(ckpt.meta["epoch"], 1);
}

#[test]
fn step_budget_ends_training() {
    let variant = VariantSpec::GESTURE_CONCAT;
    let train = clips(4, MissingPolicy::NONE);
    let cfg = TrainConfig {
        effective_batch: 2,
        physical_batch: 1,
        crop_secs: Some(0.2),
        max_steps: Some(3),
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(quiet_model(variant), variant, cfg, DType::F32).unwrap();
    let outcome = trainer.fit(&train, &train[..1].to_vec(), None).unwrap();
    assert_eq!(outcome.steps.len(), 3);
    assert_eq!(outcome.epochs.len(), 2);
    assert!(!outcome.stopped_early);
    assert!(outcome.steps.iter().all(|s| s.loss.is_finite() && s.grad_norm.is_finite()));
}

#[test]
fn config_validation() {
    let ok = TrainConfig::desk();
    assert!(ok.validate().is_ok());
    assert!(TrainConfig { effective_batch: 6, physical_batch: 4, ..ok.clone() }.validate().is_err());
    assert!(TrainConfig { crop_secs: None, ..ok.clone() }.validate().is_err());
    assert!(TrainConfig { crop_secs: None, physical_batch: 1, effective_batch: 4, ..ok.clone() }.validate().is_ok());
    assert!(TrainConfig { crop_secs: Some(0.3), ..ok.clone() }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
    assert!(TrainConfig { plateau_patience: 10, ..ok }.validate().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1e-3, "bogus": 1}"#).is_err());
}
