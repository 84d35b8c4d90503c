//! Equal-budget training of the six comparison systems on the synthetic corpus.
//!
//! Every system receives the same number of optimizer steps. The four base systems
//! train from scratch for `base_steps`; then every system gets `extra_steps` more with a
//! fresh optimizer and schedule. For the two alignment-loss systems those extra steps
//! are the fine-tuning stage, for the others they continue the plain objective.
//! Checkpoints and reports are cached under a key derived from the plan, so a rerun with
//! an unchanged plan only re-reads them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use serde::{Serialize};

use selg::datasim::{generate_split, MixtureSample, SimConfig, Split};
use selg::evaluation::{evaluate, records_csv, EvalReport};
use selg::nn::ParamStore;
use selg::separator::{load_checkpoint, save_checkpoint, ModelConfig, SelgModel, VariantSpec};
use selg::training::{finetune_infonce, LipTeacher, TrainConfig, Trainer};

#[derive(Debug, Clone, Serialize)]
pub struct TrendPlan {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub base_steps: usize,
    pub extra_steps: usize,
}

impl TrendPlan {
    pub fn desk() -> Self {
        Self {
            sim: SimConfig::default(),
            train: TrainConfig {
                lr: 1e-3,
                warmup_steps: 100,
                effective_batch: 8,
                physical_batch: 8,
                crop_secs: Some(0.6),
                val_secs: Some(2.0),
                deterministic: true,
                max_epochs: 1000,
                ..TrainConfig::desk()
            },
            base_steps: 800,
            extra_steps: 400,
        }
    }

    fn key(&self) -> String {
        let text = serde_json::to_string(self).expect("plan serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes().chain(env!("CARGO_PKG_VERSION").bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("trend-{h:016x}")
    }
}

pub struct TrendResult {
    /// Reports of systems 1 to 6, in order.
    pub reports: Vec<(String, EvalReport)>,
    pub seconds: f64,
}

pub const SYSTEMS: [(&str, VariantSpec); 6] = [
    ("sys1-lip", VariantSpec::LIP_CONCAT),
    ("sys2-gesture", VariantSpec::GESTURE_CONCAT),
    ("sys3-gesture-nce", VariantSpec::GESTURE_CONCAT_INFONCE),
    ("sys4-both-concat", VariantSpec::BOTH_CONCAT),
    ("sys5-both-attention", VariantSpec::BOTH_ATTENTION),
    ("sys6-both-attention-nce", VariantSpec::BOTH_ATTENTION_INFONCE),
];

fn cache_root() -> PathBuf {
    match std::env::var_os("SELG_CACHE") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/selg-cache"),
    }
}

struct Data {
    train: Vec<MixtureSample>,
    val: Vec<MixtureSample>,
}

struct Runner {
    plan: TrendPlan,
    dir: PathBuf,
    data: Option<Data>,
}

impl Runner {
    fn data(&mut self) -> &Data {
        let sim = self.plan.sim.clone();
        self.data.get_or_insert_with(|| Data {
            train: generate_split(&sim, Split::Train).expect("train split"),
            val: generate_split(&sim, Split::Val).expect("val split"),
        })
    }

    fn cfg(&self, steps: usize) -> TrainConfig {
        TrainConfig { max_steps: Some(steps), ..self.plan.train.clone() }
    }

    /// Trains (or reloads) one stage and returns the retained parameters.
    fn stage(&mut self, name: &str, make: impl FnOnce(&Self) -> Trainer) -> (ModelConfig, ParamStore) {
        let path = self.dir.join(format!("{name}.ckpt"));
        if let Ok(ckpt) = load_checkpoint(&path, DType::F32) {
            eprintln!("trend: reusing {name}");
            return (ckpt.config, ckpt.store);
        }
        let start = Instant::now();
        let mut trainer = make(self);
        let data = self.data();
        let (train, val) = (&data.train, &data.val);
        let outcome = trainer.fit(train, val, None).expect("training");
        let meta = serde_json::json!({
            "variant": trainer.variant(),
            "epoch": outcome.best_epoch,
            "val_loss": outcome.best_val_loss,
            "steps": trainer.steps_taken(),
        });
        save_checkpoint(&path, trainer.model_config(), &outcome.best, meta).expect("checkpoint");
        let log: Vec<_> = outcome.epochs.iter().map(|e| serde_json::to_value(e).unwrap()).collect();
        fs::write(self.dir.join(format!("{name}.log.json")), serde_json::to_string_pretty(&log).unwrap()).unwrap();
        eprintln!(
            "trend: {name} {} steps, best val {:.3} at epoch {}, {:.0} s",
            trainer.steps_taken(),
            outcome.best_val_loss,
            outcome.best_epoch,
            start.elapsed().as_secs_f64()
        );
        (trainer.model_config().clone(), outcome.best)
    }
}

pub fn run(plan: TrendPlan) -> TrendResult {
    let start = Instant::now();
    let dir = cache_root().join(plan.key());
    fs::create_dir_all(&dir).expect("cache dir");
    fs::write(dir.join("plan.json"), serde_json::to_string_pretty(&plan).unwrap()).unwrap();
    let mut r = Runner { plan, dir: dir.clone(), data: None };
    let (base, extra) = (r.plan.base_steps, r.plan.extra_steps);

    let base_stage = |r: &mut Runner, name: &str, v: VariantSpec| {
        r.stage(&format!("{name}-base"), |r| Trainer::new(ModelConfig::desk(v), v, r.cfg(base), DType::F32).unwrap())
    };
    let lip_base = base_stage(&mut r, "sys1-lip", VariantSpec::LIP_CONCAT);
    let gesture_base = base_stage(&mut r, "sys2-gesture", VariantSpec::GESTURE_CONCAT);
    let both_base = base_stage(&mut r, "sys4-both-concat", VariantSpec::BOTH_CONCAT);
    let att_base = base_stage(&mut r, "sys5-both-attention", VariantSpec::BOTH_ATTENTION);

    let continue_stage = |r: &mut Runner, name: &str, v: VariantSpec, from: &(ModelConfig, ParamStore)| {
        let (cfg, store) = (from.0.clone(), from.1.deep_clone().unwrap());
        r.stage(name, |r| Trainer::from_store(cfg, store, v, r.cfg(extra)).unwrap())
    };
    let finetune_stage =
        |r: &mut Runner, name: &str, v: VariantSpec, from: &(ModelConfig, ParamStore), teacher: Option<LipTeacher>| {
            let ckpt = selg::separator::Checkpoint {
                config: from.0.clone(),
                meta: serde_json::json!({}),
                store: from.1.deep_clone().unwrap(),
            };
            r.stage(name, |r| {
                let t = finetune_infonce(&ckpt, v, r.cfg(extra)).unwrap();
                match teacher {
                    Some(teacher) => t.with_teacher(teacher),
                    None => t,
                }
            })
        };

    let sys1 = continue_stage(&mut r, "sys1-lip", VariantSpec::LIP_CONCAT, &lip_base);
    let sys2 = continue_stage(&mut r, "sys2-gesture", VariantSpec::GESTURE_CONCAT, &gesture_base);
    let teacher = LipTeacher::from_checkpoint(&selg::separator::Checkpoint {
        config: sys1.0.clone(),
        meta: serde_json::json!({}),
        store: sys1.1.deep_clone().unwrap(),
    })
    .unwrap();
    let sys3 = finetune_stage(&mut r, "sys3-gesture-nce", VariantSpec::GESTURE_CONCAT_INFONCE, &gesture_base, Some(teacher));
    let sys4 = continue_stage(&mut r, "sys4-both-concat", VariantSpec::BOTH_CONCAT, &both_base);
    let sys5 = continue_stage(&mut r, "sys5-both-attention", VariantSpec::BOTH_ATTENTION, &att_base);
    let sys6 = finetune_stage(&mut r, "sys6-both-attention-nce", VariantSpec::BOTH_ATTENTION_INFONCE, &att_base, None);
    drop(r.data.take());

    let test = generate_split(&r.plan.sim, Split::Test).expect("test split");
    let trained = [sys1, sys2, sys3, sys4, sys5, sys6];
    let mut reports = Vec::new();
    for ((name, variant), (cfg, store)) in SYSTEMS.iter().zip(trained) {
        let path = dir.join(format!("{name}.report.json"));
        let report = match fs::read_to_string(&path).ok().and_then(|t| serde_json::from_str::<EvalReport>(&t).ok()) {
            Some(rep) => rep,
            None => {
                let mut frozen = store.detached();
                let model = SelgModel::new(cfg, &mut frozen).unwrap();
                let records = evaluate(&model, *variant, &test, false).unwrap();
                fs::write(dir.join(format!("{name}.records.csv")), records_csv(&records)).unwrap();
                let rep = EvalReport::from_records(*variant, &records).unwrap();
                fs::write(&path, serde_json::to_string_pretty(&rep).unwrap()).unwrap();
                rep
            }
        };
        reports.push((name.to_string(), report));
    }
    TrendResult { reports, seconds: start.elapsed().as_secs_f64() }
}
