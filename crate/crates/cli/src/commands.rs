use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use candle_core::DType;

use selg::datasim::{build_corpus, CorpusSummary, Manifest, SimConfig, Split};
use selg::evaluation::{evaluate as score_all, histogram_svg, records_csv, table_markdown, EvalReport, Histogram};
use selg::separator::{load_checkpoint, Checkpoint, ModelConfig, VariantSpec};
use selg::training::{finetune_infonce, LipTeacher, ManifestSource, TrainOutcome, Trainer};

use crate::config::{self, EvalRun, FinetuneRun, ReportRun, TrainRun};
use crate::{usage, Common};

pub fn set_jobs(jobs: usize) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("configuring the worker pool")
}

fn out_dir(common: &Common, command: &str) -> anyhow::Result<PathBuf> {
    let dir = match (&common.out, std::env::var_os("SELG_CACHE")) {
        (Some(d), _) => d.clone(),
        (None, Some(cache)) => PathBuf::from(cache).join(command),
        (None, None) => return Err(usage("--out is required when SELG_CACHE is not set")),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn require_config(common: &Common) -> anyhow::Result<&Path> {
    common.config.as_deref().ok_or_else(|| usage("--config is required for this command"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_manifest(path: &Path) -> anyhow::Result<Manifest> {
    Manifest::read(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn split_source<'a>(manifest: &'a Manifest, split: Split) -> anyhow::Result<ManifestSource<'a>> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(usage(format!("corpus has no {split} samples")));
    }
    Ok(ManifestSource::new(manifest, entries, split != Split::Train))
}

pub fn synth_data(common: &Common) -> anyhow::Result<()> {
    let mut cfg: SimConfig = match &common.config {
        Some(p) => config::read_over(p, &SimConfig::default())?,
        None => SimConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = out_dir(common, "corpus")?;
    let manifest = build_corpus(&cfg, &out)?;
    let summary = CorpusSummary::of(&manifest.entries);
    println!("corpus written to {}", out.display());
    println!("train {} / val {} / test {}", summary.train, summary.val, summary.test);
    println!(
        "lip missing {:.1}%, gesture missing {:.1}% ({:.1}% of samples with lips)",
        100.0 * summary.lip_missing,
        100.0 * summary.gesture_missing,
        100.0 * summary.gesture_missing_given_lip
    );
    Ok(())
}

fn teacher(base: &Path, path: Option<&Path>) -> anyhow::Result<Option<LipTeacher>> {
    path.map(|p| {
        let ckpt = load_checkpoint(&config::resolve(base, p), DType::F32)?;
        Ok(LipTeacher::from_checkpoint(&ckpt)?)
    })
    .transpose()
}

fn run_fit(mut trainer: Trainer, corpus: &Path, out: &Path) -> anyhow::Result<TrainOutcome> {
    let manifest = read_manifest(corpus)?;
    let train = split_source(&manifest, Split::Train)?;
    let val = split_source(&manifest, Split::Val)?;
    let outcome = trainer.fit(&train, &val, Some(out))?;
    println!(
        "{}: {} epochs, {} steps, best validation loss {:.4} at epoch {}{}",
        trainer.variant().label(),
        outcome.epochs.len(),
        trainer.steps_taken(),
        outcome.best_val_loss,
        outcome.best_epoch,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    if let Some(ckpt) = &outcome.checkpoint {
        println!("checkpoint {}", ckpt.display());
    }
    Ok(outcome)
}

pub fn train(common: &Common) -> anyhow::Result<()> {
    let path = require_config(common)?;
    let mut run: TrainRun = config::read(path)?;
    let base = config::base_dir(path);
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    run.train.deterministic |= common.deterministic;
    let model = run.model.clone().unwrap_or_else(|| ModelConfig::desk(run.variant));
    let out = out_dir(common, "train")?;
    write_json(&out.join("run.json"), &run)?;
    let mut trainer = Trainer::new(model, run.variant, run.train.clone(), DType::F32)?;
    if let Some(t) = teacher(&base, run.lip_teacher.as_deref())? {
        trainer = trainer.with_teacher(t);
    }
    run_fit(trainer, &config::resolve(&base, &run.corpus), &out)?;
    Ok(())
}

pub fn finetune(common: &Common) -> anyhow::Result<()> {
    let path = require_config(common)?;
    let mut run: FinetuneRun = config::read(path)?;
    let base = config::base_dir(path);
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    run.train.deterministic |= common.deterministic;
    let ckpt_path = config::resolve(&base, &run.base_checkpoint);
    let ckpt = load_checkpoint(&ckpt_path, DType::F32).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let out = out_dir(common, "finetune")?;
    write_json(&out.join("run.json"), &run)?;
    let mut trainer = finetune_infonce(&ckpt, run.variant, run.train.clone())?;
    if let Some(t) = teacher(&base, run.lip_teacher.as_deref())? {
        trainer = trainer.with_teacher(t);
    }
    run_fit(trainer, &config::resolve(&base, &run.corpus), &out)?;
    Ok(())
}

fn checkpoint_variant(ckpt: &Checkpoint, requested: Option<VariantSpec>) -> anyhow::Result<VariantSpec> {
    let stored: Option<VariantSpec> =
        ckpt.meta.get("variant").cloned().map(serde_json::from_value).transpose().context("checkpoint metadata")?;
    let variant = requested.or(stored).ok_or_else(|| usage("variant not given and not recorded in the checkpoint"))?;
    if !ckpt.config.supports(variant) {
        return Err(usage(format!("checkpoint layout does not match variant {}", variant.label())));
    }
    Ok(variant)
}

pub fn evaluate(common: &Common) -> anyhow::Result<()> {
    let path = require_config(common)?;
    let run: EvalRun = config::read(path)?;
    let base = config::base_dir(path);
    let ckpt_path = run.checkpoint.as_deref().ok_or_else(|| usage("evaluation needs a checkpoint"))?;
    let split: Split = run.split.parse().map_err(|e: selg::Error| usage(e.to_string()))?;
    let mut ckpt = load_checkpoint(&config::resolve(&base, ckpt_path), DType::F32)?;
    let variant = checkpoint_variant(&ckpt, run.variant)?;
    let model = ckpt.model()?;
    let manifest = read_manifest(&config::resolve(&base, &run.corpus))?;
    let source = split_source(&manifest, split)?;
    let records = score_all(&model, variant, &source, !common.deterministic)?;
    let mut report = EvalReport::from_records(variant, &records)?;
    let values: Vec<f64> = records.iter().map(|r| r.si_snri).collect();
    report.histogram = Histogram::new(&values, run.bin_width, run.range)?;
    let out = out_dir(common, "evaluate")?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("records.csv"), records_csv(&records))?;
    fs::write(out.join("histogram.csv"), report.histogram.to_csv())?;
    fs::write(out.join("histogram.svg"), histogram_svg(&report.histogram, &variant.label()))?;
    let fmt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
    println!(
        "{}: full {:.4} dB ({}), w/o-missing {} dB ({}), w/-missing {} dB ({})",
        variant.label(),
        report.full,
        report.counts.full,
        fmt(report.wo_missing),
        report.counts.wo_missing,
        fmt(report.w_missing),
        report.counts.w_missing
    );
    Ok(())
}

pub fn report(common: &Common) -> anyhow::Result<()> {
    let path = require_config(common)?;
    let run: ReportRun = config::read(path)?;
    if run.runs.is_empty() {
        return Err(usage("report needs at least one run"));
    }
    let base = config::base_dir(path);
    let out = out_dir(common, "report")?;
    let mut rows = Vec::new();
    for entry in &run.runs {
        let mut p = config::resolve(&base, &entry.report);
        if p.is_dir() {
            p = p.join("report.json");
        }
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let report: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let stem: String = entry.name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        fs::write(out.join(format!("{stem}_histogram.svg")), histogram_svg(&report.histogram, &entry.name))?;
        fs::write(out.join(format!("{stem}_histogram.csv")), report.histogram.to_csv())?;
        rows.push((entry.name.clone(), report));
    }
    let table = table_markdown(&rows);
    fs::write(out.join("table.md"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn inspect(sample_id: &str, corpus: Option<PathBuf>, common: &Common) -> anyhow::Result<()> {
    let corpus = match (corpus, &common.config) {
        (Some(c), _) => c,
        (None, Some(cfg)) => {
            let run: EvalRun = config::read(cfg)?;
            config::resolve(&config::base_dir(cfg), &run.corpus)
        }
        (None, None) => return Err(usage("inspect needs --corpus or --config")),
    };
    let manifest = read_manifest(&corpus)?;
    let entry = manifest.find(sample_id).ok_or_else(|| usage(format!("no sample {sample_id} in {}", corpus.display())))?;
    let sample = manifest.load(entry)?;
    let presence = entry.presence();
    println!("id          {}", entry.id);
    println!("split       {}", entry.split);
    println!("seed        {}", entry.seed);
    println!("duration    {:.3} s ({} samples)", sample.mixture.duration_secs(), sample.len());
    println!("target      {}", entry.target_speaker);
    for (k, (spk, snr)) in entry.interferer_speakers.iter().zip(&entry.snr_db).enumerate() {
        println!("interferer{k} {spk} at {snr:.3} dB");
    }
    println!("lip         {}", if presence.has_lip { "present" } else { "missing" });
    println!("gesture     {}", if presence.has_gesture { "present" } else { "missing" });
    Ok(())
}
