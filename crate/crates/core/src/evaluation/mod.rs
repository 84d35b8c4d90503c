//! SI-SNRi scoring, missing-cue subsets, histograms and comparison tables.

mod histogram;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::datasim::MixtureSample;
use crate::error::{Error, Result};
use crate::losses::si_snr;
use crate::separator::{CuePresence, CueSet, SelgModel, VariantSpec};
use crate::training::SampleSource;

pub use histogram::{histogram_svg, Histogram};
pub use report::{records_csv, table_markdown, EvalReport, SubsetCounts};

/// SI-SNR floor shared by training and scoring.
pub const EVAL_EPS: f64 = 1e-8;

/// Improvement of `estimate` over the unprocessed `mixture`, both against `target`.
pub fn si_snri(mixture: &Waveform, target: &Waveform, estimate: &Waveform) -> Result<f64> {
    Ok(si_snr(target, estimate, EVAL_EPS)? - si_snr(target, mixture, EVAL_EPS)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    /// Every cue the variant uses is available.
    WoMissing,
    /// At least one cue the variant uses is absent.
    WMissing,
}

impl Subset {
    pub fn label(self) -> &'static str {
        match self {
            Subset::WoMissing => "w/o-missing",
            Subset::WMissing => "w/-missing",
        }
    }
}

/// Which subset a sample falls in for `variant`. Cues the variant ignores do not count.
pub fn classify_subset(presence: CuePresence, variant: VariantSpec) -> Subset {
    let complete = match variant.cues {
        CueSet::Lip => presence.has_lip,
        CueSet::Gesture => presence.has_gesture,
        CueSet::Both => presence.has_lip && presence.has_gesture,
    };
    if complete {
        Subset::WoMissing
    } else {
        Subset::WMissing
    }
}

/// Scores of one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub si_snr_mix: f64,
    pub si_snr_est: f64,
    pub si_snri: f64,
    pub has_lip: bool,
    pub has_gesture: bool,
    pub subset: Subset,
}

impl EvalRecord {
    pub fn presence(&self) -> CuePresence {
        CuePresence { has_lip: self.has_lip, has_gesture: self.has_gesture }
    }
}

/// Runs the model on one sample. A cue the variant uses but the sample lacks goes
/// through the zeroed branch.
pub fn score_sample(model: &SelgModel, variant: VariantSpec, sample: &MixtureSample) -> Result<EvalRecord> {
    let estimate = model
        .extract(&sample.mixture, sample.lip.as_ref(), sample.gesture.as_ref())
        .map_err(|e| Error::invalid(format!("sample {}: {e}", sample.id)))?;
    let si_snr_mix = si_snr(&sample.target, &sample.mixture, EVAL_EPS)?;
    let si_snr_est = si_snr(&sample.target, &estimate, EVAL_EPS)?;
    let presence = CuePresence { has_lip: sample.lip.is_some(), has_gesture: sample.gesture.is_some() };
    Ok(EvalRecord {
        id: sample.id.clone(),
        si_snr_mix,
        si_snr_est,
        si_snri: si_snr_est - si_snr_mix,
        has_lip: presence.has_lip,
        has_gesture: presence.has_gesture,
        subset: classify_subset(presence, variant),
    })
}

/// Scores every sample of `source`; records come back sorted by id. `parallel` spreads
/// samples over the rayon pool; the result does not depend on it.
pub fn evaluate(model: &SelgModel, variant: VariantSpec, source: &dyn SampleSource, parallel: bool) -> Result<Vec<EvalRecord>> {
    if source.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let score = |i: usize| -> Result<EvalRecord> { score_sample(model, variant, &source.get(i)?) };
    let mut records: Vec<EvalRecord> = if parallel {
        (0..source.len()).into_par_iter().map(score).collect::<Result<_>>()?
    } else {
        (0..source.len()).map(score).collect::<Result<_>>()?
    };
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}
