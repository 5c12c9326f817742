//! Published multi-resolution verification accuracies and their gains.

use std::fmt::Write as _;

use crate::error::Result;
use crate::eval::{cross_res_gain, same_res_gain};

pub const CROSS_SETTINGS: [&str; 3] = ["112&7", "112&14", "112&28"];
pub const SAME_SETTINGS: [&str; 4] = ["7&7", "14&14", "28&28", "112&112"];

/// One row: accuracy and printed gain for each of the seven settings, cross
/// settings first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub model: &'static str,
    pub acc: [f64; 7],
    pub gain: [Option<f64>; 7],
}

pub const PUBLISHED: [PublishedRow; 6] = [
    PublishedRow { model: "hr", acc: [57.75, 81.02, 95.90, 60.70, 73.88, 93.58, 97.68], gain: [None; 7] },
    PublishedRow {
        model: "mm",
        acc: [50.58, 49.90, 50.03, 62.57, 78.00, 94.68, 97.68],
        gain: [Some(-0.89), Some(-4.82), Some(-305.80), Some(1.00), Some(1.00), Some(1.00), None],
    },
    PublishedRow {
        model: "mr",
        acc: [65.85, 87.47, 96.05, 61.02, 80.32, 95.12, 97.25],
        gain: [Some(1.00), Some(1.00), Some(1.00), Some(0.17), Some(1.56), Some(1.40), None],
    },
    PublishedRow {
        model: "mr(v2)",
        acc: [65.68, 87.13, 95.70, 60.82, 80.22, 95.63, 96.82],
        gain: [Some(0.98), Some(0.95), Some(-1.33), Some(0.06), Some(1.54), Some(1.86), None],
    },
    PublishedRow {
        model: "mr(v3)",
        acc: [68.80, 88.13, 96.62, 61.62, 80.55, 94.78, 97.52],
        gain: [Some(1.36), Some(1.10), Some(4.80), Some(0.49), Some(1.62), Some(1.09), None],
    },
    PublishedRow {
        model: "bt",
        acc: [86.10, 94.08, 96.65, 77.78, 90.90, 96.27, 97.25],
        gain: [Some(3.50), Some(2.02), Some(5.00), Some(9.13), Some(4.13), Some(2.45), None],
    },
];

/// Tolerance for a recomputed cell: rounding of the two-decimal inputs,
/// amplified when the denominator is small.
pub fn tolerance(denominator: f64) -> f64 {
    if denominator < 0.5 {
        0.5
    } else {
        0.01
    }
}

/// A recomputed gain next to its published value.
#[derive(Debug, Clone, PartialEq)]
pub struct GainCell {
    pub model: &'static str,
    pub setting: &'static str,
    pub published: f64,
    pub recomputed: f64,
    pub denominator: f64,
}

impl GainCell {
    pub fn within_tolerance(&self) -> bool {
        (self.recomputed - self.published).abs() <= tolerance(self.denominator)
    }
}

fn row(model: &str) -> &'static PublishedRow {
    PUBLISHED.iter().find(|r| r.model == model).expect("model is in the published table")
}

/// Every printed gain recomputed from the accuracy cells: cross settings
/// against the multi-resolution baseline, same settings against the model
/// trained at that resolution.
pub fn recompute_gains() -> Result<Vec<GainCell>> {
    let (hr, mm, mr) = (row("hr"), row("mm"), row("mr"));
    let settings: Vec<&'static str> = CROSS_SETTINGS.iter().chain(&SAME_SETTINGS).copied().collect();
    let mut cells = Vec::new();
    for r in &PUBLISHED {
        for (k, published) in r.gain.iter().enumerate() {
            let Some(published) = *published else { continue };
            let (recomputed, base) = if k < CROSS_SETTINGS.len() {
                (cross_res_gain(r.acc[k], hr.acc[k], mr.acc[k])?, mr.acc[k])
            } else {
                (same_res_gain(r.acc[k], hr.acc[k], mm.acc[k])?, mm.acc[k])
            };
            cells.push(GainCell { model: r.model, setting: settings[k], published, recomputed, denominator: (base - hr.acc[k]).abs() });
        }
    }
    Ok(cells)
}

pub const GAIN_HEADER: &str = "model,setting,published,recomputed,abs_diff,tolerance,ok";

pub fn gains_csv(cells: &[GainCell]) -> String {
    let mut out = format!("{GAIN_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.4},{:.4},{},{}",
            c.model,
            c.setting,
            c.published,
            c.recomputed,
            (c.recomputed - c.published).abs(),
            tolerance(c.denominator),
            c.within_tolerance()
        );
    }
    out
}
