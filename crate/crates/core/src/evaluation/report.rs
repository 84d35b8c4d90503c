use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::histogram::Histogram;
use super::{mean, EvalRecord, Subset};
use crate::error::{Error, Result};
use crate::separator::{CueSet, Fusion, VariantSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub full: usize,
    pub wo_missing: usize,
    pub w_missing: usize,
}

/// Mean SI-SNRi per subset. Means are kept at full precision; an empty subset has none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: VariantSpec,
    pub full: f64,
    pub wo_missing: Option<f64>,
    pub w_missing: Option<f64>,
    pub counts: SubsetCounts,
    pub histogram: Histogram,
}

impl EvalReport {
    pub fn from_records(variant: VariantSpec, records: &[EvalRecord]) -> Result<Self> {
        let full = mean(records.iter().map(|r| r.si_snri)).ok_or_else(|| Error::invalid("report over no records"))?;
        let of = |s: Subset| records.iter().filter(move |r| r.subset == s).map(|r| r.si_snri);
        let values: Vec<f64> = records.iter().map(|r| r.si_snri).collect();
        Ok(Self {
            variant,
            full,
            wo_missing: mean(of(Subset::WoMissing)),
            w_missing: mean(of(Subset::WMissing)),
            counts: SubsetCounts {
                full: records.len(),
                wo_missing: of(Subset::WoMissing).count(),
                w_missing: of(Subset::WMissing).count(),
            },
            histogram: Histogram::with_defaults(&values)?,
        })
    }
}

/// One line per record, id order preserved.
pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("id,si_snr_mix,si_snr_est,si_snri,has_lip,has_gesture,subset\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.id,
            r.si_snr_mix,
            r.si_snr_est,
            r.si_snri,
            r.has_lip,
            r.has_gesture,
            r.subset.label()
        );
    }
    out
}

/// Comparison table with one row per named report, one decimal per cell.
pub fn table_markdown(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("| System | Modalities | Fusion | Loss | Full | w/o-missing | w/-missing |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
    for (name, r) in rows {
        let cues = match r.variant.cues {
            CueSet::Lip => "lip",
            CueSet::Gesture => "gesture",
            CueSet::Both => "lip + gesture",
        };
        let fusion = match r.variant.fusion {
            Fusion::Concatenation => "concat",
            Fusion::Attention => "attention",
        };
        let loss = if r.variant.use_infonce { "SI-SNR + InfoNCE" } else { "SI-SNR" };
        let _ = writeln!(
            out,
            "| {name} | {cues} | {fusion} | {loss} | {} | {} | {} |",
            cell(Some(r.full)),
            cell(r.wo_missing),
            cell(r.w_missing)
        );
    }
    out
}
