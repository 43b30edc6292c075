//! Design ablation ladder: the same data, seed and budget under five toggle sets.

use std::fmt::Write as _;

use anyhow::{Context, Result};
use mrfdet_core::net::{SegMode, Toggles};

use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::infer::{evaluate_model, InferenceConfig};
use crate::train::{train, TrainState};

pub fn ladder() -> Vec<(&'static str, Toggles)> {
    let t = |mrf, extra_level, seg| Toggles { mrf, extra_level, seg };
    vec![
        ("baseline", t(false, false, SegMode::Off)),
        ("+MRF", t(true, false, SegMode::Off)),
        ("+MRF +extra", t(true, true, SegMode::Off)),
        ("+MRF +extra +AWS", t(true, true, SegMode::Aws)),
        ("+MRF +extra +SWS", t(true, true, SegMode::Sws)),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub map: f64,
    pub ap_small: Option<f64>,
    pub final_loss: f64,
}

/// Trains and evaluates every ladder row; `on_row` sees each row as it finishes.
pub fn ablate(base: &ExperimentConfig, data: &Dataset, on_row: &mut dyn FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, toggles) in ladder() {
        let mut cfg = base.clone();
        cfg.train.set_toggles(toggles);
        let mut state = TrainState::new(&cfg)?;
        let mut last = f64::NAN;
        train(&mut state, &data.train, None, &mut |log| last = log.loss.total).with_context(|| format!("row {name}"))?;
        let ev = evaluate_model(&state.net, &data.test, &InferenceConfig::for_config(&cfg), false)?;
        let ap_small = ev.report.per_area.iter().find(|(n, _)| n == "S").and_then(|(_, v)| *v);
        let row = AblationRow {
            name: name.to_string(),
            toggles,
            map: ev.report.map,
            ap_small,
            final_loss: last,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>3} {:>5} {:>4}  {:>7}  {:>7}  {:>10}", "design", "mrf", "extra", "seg", "mAP@0.5", "AP_S", "final loss");
    for r in rows {
        let seg = match r.toggles.seg {
            SegMode::Off => "-",
            SegMode::Aws => "aws",
            SegMode::Sws => "sws",
        };
        let _ = writeln!(
            s,
            "{:<18} {:>3} {:>5} {:>4}  {:>7.4}  {:>7}  {:>10.5}",
            r.name,
            mark(r.toggles.mrf),
            mark(r.toggles.extra_level),
            seg,
            r.map,
            r.ap_small.map_or("-".to_string(), |v| format!("{v:.4}")),
            r.final_loss
        );
    }
    s
}
