use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{invalid, Result};

/// Metrics of one evaluation setting. Rates are fractions in `[0, 1]`;
/// [`MetricReport::to_csv`] and [`MetricReport::to_table`] print percentages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub setting: String,
    pub accuracy: Option<f64>,
    pub tar_at_far: BTreeMap<String, f64>,
    pub tpir_at_fpir: BTreeMap<String, f64>,
    pub auc: Option<f64>,
    pub gains: BTreeMap<String, Option<f64>>,
}

pub const REPORT_HEADER: &str = "setting,metric,key,value";

fn key(x: f64) -> String {
    format!("{x:e}")
}

impl MetricReport {
    pub fn new(setting: impl Into<String>) -> Self {
        Self { setting: setting.into(), ..Self::default() }
    }

    pub fn with_accuracy(mut self, accuracy: f64) -> Self {
        self.accuracy = Some(accuracy);
        self
    }

    pub fn add_tar(&mut self, far: f64, tar: f64) {
        self.tar_at_far.insert(key(far), tar);
    }

    pub fn add_tpir(&mut self, fpir: f64, tpir: f64) {
        self.tpir_at_fpir.insert(key(fpir), tpir);
    }

    /// Checks every rate lies in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let rates = self.accuracy.iter().chain(self.tar_at_far.values()).chain(self.tpir_at_fpir.values()).chain(self.auc.iter());
        for &r in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid!("rate {r} of {} outside [0, 1]", self.setting));
            }
        }
        Ok(())
    }

    /// Rows under [`REPORT_HEADER`]; undefined gains print as `-`.
    pub fn to_csv_rows(&self) -> String {
        let mut out = String::new();
        let s = &self.setting;
        if let Some(a) = self.accuracy {
            let _ = writeln!(out, "{s},accuracy,,{:.4}", 100.0 * a);
        }
        for (k, v) in &self.tar_at_far {
            let _ = writeln!(out, "{s},tar_at_far,{k},{:.4}", 100.0 * v);
        }
        for (k, v) in &self.tpir_at_fpir {
            let _ = writeln!(out, "{s},tpir_at_fpir,{k},{:.4}", 100.0 * v);
        }
        if let Some(a) = self.auc {
            let _ = writeln!(out, "{s},auc,,{:.4}", 100.0 * a);
        }
        for (k, v) in &self.gains {
            let value = v.map_or_else(|| "-".to_string(), |g| format!("{g:.4}"));
            let _ = writeln!(out, "{s},gain,{k},{value}");
        }
        out
    }

    pub fn to_csv(reports: &[MetricReport]) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        reports.iter().for_each(|r| out.push_str(&r.to_csv_rows()));
        out
    }

    /// Aligned human-readable table, one row per report.
    pub fn to_table(reports: &[MetricReport]) -> String {
        let mut columns: Vec<String> = vec!["setting".into()];
        let mut extra: Vec<String> = Vec::new();
        for r in reports {
            let keys = r
                .tar_at_far
                .keys()
                .map(|k| format!("TAR@{k}"))
                .chain(r.tpir_at_fpir.keys().map(|k| format!("TPIR@{k}")))
                .chain(r.gains.keys().map(|k| format!("gain {k}")));
            for k in keys {
                if !extra.contains(&k) {
                    extra.push(k);
                }
            }
        }
        let has_acc = reports.iter().any(|r| r.accuracy.is_some());
        let has_auc = reports.iter().any(|r| r.auc.is_some());
        if has_acc {
            columns.push("acc %".into());
        }
        columns.extend(extra.iter().cloned());
        if has_auc {
            columns.push("AUC %".into());
        }
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let rows: Vec<Vec<String>> = reports
            .iter()
            .map(|r| {
                let mut row = vec![r.setting.clone()];
                if has_acc {
                    row.push(pct(r.accuracy));
                }
                for k in &extra {
                    let cell = if let Some(f) = k.strip_prefix("TAR@") {
                        pct(r.tar_at_far.get(f).copied())
                    } else if let Some(f) = k.strip_prefix("TPIR@") {
                        pct(r.tpir_at_fpir.get(f).copied())
                    } else {
                        let g = k.strip_prefix("gain ").unwrap_or(k);
                        r.gains.get(g).copied().flatten().map_or_else(|| "-".to_string(), |v| format!("{v:+.2}"))
                    };
                    row.push(cell);
                }
                if has_auc {
                    row.push(pct(r.auc));
                }
                row
            })
            .collect();
        let widths: Vec<usize> =
            (0..columns.len()).map(|i| rows.iter().map(|r| r[i].len()).chain([columns[i].len()]).max().unwrap_or(0)).collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
        };
        let mut out = line(&columns) + "\n";
        for r in &rows {
            out += &line(r);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_table() {
        let mut r = MetricReport::new("32&8").with_accuracy(0.8125);
        r.add_tar(1e-4, 0.5);
        r.gains.insert("cross".into(), None);
        r.validate().unwrap();
        let csv = MetricReport::to_csv(&[r.clone()]);
        assert!(csv.starts_with(REPORT_HEADER));
        assert!(csv.contains("32&8,accuracy,,81.2500"));
        assert!(csv.contains("32&8,tar_at_far,1e-4,50.0000"));
        assert!(csv.contains("32&8,gain,cross,-"));
        let table = MetricReport::to_table(&[r]);
        assert!(table.contains("81.25"));
        assert!(table.contains("TAR@1e-4"));
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(MetricReport::new("x").with_accuracy(1.5).validate().is_err());
    }
}
