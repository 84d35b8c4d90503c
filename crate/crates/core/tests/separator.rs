use candle_core::{DType, Tensor};
use serde_json::json;

use selg::datasim::{generate_split, MissingPolicy, SimConfig, Split, SplitCounts};
use selg::nn::{Ctx, ParamStore};
use selg::separator::{load_checkpoint, save_checkpoint, ModelConfig, SelgModel, VariantSpec};
use selg::training::{assemble, DEFAULT_LIP_SIZE};

const VARIANTS: [VariantSpec; 6] = [
    VariantSpec::LIP_CONCAT,
    VariantSpec::GESTURE_CONCAT,
    VariantSpec::GESTURE_CONCAT_INFONCE,
    VariantSpec::BOTH_CONCAT,
    VariantSpec::BOTH_ATTENTION,
    VariantSpec::BOTH_ATTENTION_INFONCE,
];

fn samples(missing: MissingPolicy) -> Vec<selg::datasim::MixtureSample> {
    let sim = SimConfig { counts: SplitCounts { train: 3, val: 0, test: 0 }, duration: [0.6, 0.6], missing, ..SimConfig::default() };
    generate_split(&sim, Split::Train).unwrap()
}

#[test]
fn every_variant_produces_a_full_length_estimate() {
    let data = samples(MissingPolicy::default());
    let batch = assemble(&data, DEFAULT_LIP_SIZE, DType::F32).unwrap();
    let (b, len) = batch.mixture.dims2().unwrap();
    for variant in VARIANTS {
        let mut store = ParamStore::new(DType::F32, 1);
        let model = SelgModel::new(ModelConfig::desk(variant), &mut store).unwrap();
        let out = model.forward(&batch.mixture, &batch.cues, &mut Ctx::eval()).unwrap();
        assert_eq!(out.estimate.dims(), &[b, len], "{}", variant.label());
        let min: f32 = out.mask.min_all().unwrap().to_scalar().unwrap();
        assert!(min >= 0.0);
        assert_eq!(out.lip_embedding.is_some(), variant.cues.uses_lip());
        assert_eq!(out.gesture_embedding.is_some(), variant.cues.uses_gesture());
    }
}

#[test]
fn batched_forward_matches_single_extraction() {
    let data = samples(MissingPolicy::default());
    let batch = assemble(&data, DEFAULT_LIP_SIZE, DType::F32).unwrap();
    let variant = VariantSpec::BOTH_ATTENTION;
    let mut store = ParamStore::new(DType::F32, 2);
    let model = SelgModel::new(ModelConfig::desk(variant), &mut store).unwrap();
    let out = model.forward(&batch.mixture, &batch.cues, &mut Ctx::eval()).unwrap();
    for (i, s) in data.iter().enumerate() {
        let single = model.extract(&s.mixture, s.lip.as_ref(), s.gesture.as_ref()).unwrap();
        let row: Vec<f32> = out.estimate.get(i).unwrap().to_vec1().unwrap();
        let worst = row.iter().zip(single.samples()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst < 1e-4, "row {i} differs by {worst}");
    }
}

#[test]
fn missing_cue_rows_ignore_their_cue_content() {
    let data = samples(MissingPolicy::NONE);
    let mut batch = assemble(&data, DEFAULT_LIP_SIZE, DType::F32).unwrap();
    let variant = VariantSpec::BOTH_ATTENTION;
    let mut store = ParamStore::new(DType::F32, 4);
    let model = SelgModel::new(ModelConfig::desk(variant), &mut store).unwrap();
    batch.cues.lip_present[1] = false;
    let before = model.forward(&batch.mixture, &batch.cues, &mut Ctx::eval()).unwrap().estimate;
    let lips = batch.cues.lips.clone().unwrap();
    let noise = Tensor::rand(0f32, 1.0, lips.dims(), lips.device()).unwrap();
    batch.cues.lips = Some(noise);
    let after = model.forward(&batch.mixture, &batch.cues, &mut Ctx::eval()).unwrap().estimate;
    let diff = |i: usize| -> f32 {
        (before.get(i).unwrap() - after.get(i).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
    };
    assert_eq!(diff(1), 0.0);
    assert!(diff(0) > 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let data = samples(MissingPolicy::NONE);
    let dir = tempfile::tempdir().unwrap();
    for variant in [VariantSpec::LIP_CONCAT, VariantSpec::BOTH_ATTENTION_INFONCE] {
        let mut store = ParamStore::new(DType::F32, 9);
        let model = SelgModel::new(ModelConfig::desk(variant), &mut store).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, model.config(), &store, json!({ "note": "roundtrip" })).unwrap();
        let mut ckpt = load_checkpoint(&path, DType::F32).unwrap();
        assert_eq!(ckpt.meta["note"], "roundtrip");
        let reloaded = ckpt.model().unwrap();
        let s = &data[0];
        let a = model.extract(&s.mixture, s.lip.as_ref(), s.gesture.as_ref()).unwrap();
        let b = reloaded.extract(&s.mixture, s.lip.as_ref(), s.gesture.as_ref()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path, DType::F32).is_err());

    let mut store = ParamStore::new(DType::F32, 9);
    let model = SelgModel::new(ModelConfig::desk(VariantSpec::LIP_CONCAT), &mut store).unwrap();
    save_checkpoint(&path, model.config(), &store, json!({})).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(load_checkpoint(&path, DType::F32).is_err());
}

#[test]
fn extraction_without_any_cue_is_an_error() {
    let data = samples(MissingPolicy::NONE);
    let mut store = ParamStore::new(DType::F32, 5);
    let model = SelgModel::new(ModelConfig::desk(VariantSpec::BOTH_CONCAT), &mut store).unwrap();
    assert!(model.extract(&data[0].mixture, None, None).is_err());
}
