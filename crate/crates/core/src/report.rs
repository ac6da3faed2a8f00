//! Report bundles: a fixed set of named files written together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{ConfusionCounts, Metrics, RocCurve};

/// Files that every bundle contains.
pub const REQUIRED_FILES: [&str; 5] = [
    "metrics.csv",
    "roc.csv",
    "roc.svg",
    "tracks.csv",
    "config.resolved",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportBundle {
    files: BTreeMap<String, Vec<u8>>,
}

impl ReportBundle {
    pub fn insert(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), bytes.into());
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(|v| v.as_slice())
    }

    pub fn get_str(&self, name: &str) -> Option<&str> {
        self.get(name).and_then(|b| std::str::from_utf8(b).ok())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(|k| k.as_str())
    }

    /// Writes every file under `dir`, creating subdirectories as needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// `section,metric,value` rows in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    rows: Vec<(String, String, String)>,
}

impl MetricsTable {
    pub fn push(&mut self, section: &str, metric: &str, value: impl ToString) {
        self.rows
            .push((section.to_string(), metric.to_string(), value.to_string()));
    }

    pub fn get(&self, section: &str, metric: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|(s, m, _)| s == section && m == metric)
            .map(|(_, _, v)| v.as_str())
    }

    pub fn get_f64(&self, section: &str, metric: &str) -> Option<f64> {
        self.get(section, metric).and_then(|v| v.parse().ok())
    }

    pub fn counts(&mut self, section: &str, c: &ConfusionCounts) {
        self.push(section, "tp", c.tp);
        self.push(section, "tn", c.tn);
        self.push(section, "fp", c.fp);
        self.push(section, "fn", c.fn_);
    }

    /// Counts plus the four ratios; a 0/0 ratio is written as 0 and flagged.
    pub fn metrics(&mut self, section: &str, c: &ConfusionCounts, m: &Metrics) {
        self.counts(section, c);
        self.push(section, "accuracy", m.accuracy);
        self.push(section, "precision", m.precision);
        self.push(section, "recall", m.recall);
        self.push(section, "f1", m.f1);
        let mut undefined = Vec::new();
        if m.precision_undefined {
            undefined.push("precision");
        }
        if m.recall_undefined {
            undefined.push("recall");
        }
        if m.f1_undefined {
            undefined.push("f1");
        }
        if !undefined.is_empty() {
            self.push(section, "undefined_as_zero", undefined.join(" "));
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,metric,value\n");
        for (s, m, v) in &self.rows {
            let _ = writeln!(out, "{s},{m},{v}");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut table = MetricsTable::default();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(m), Some(v)) => table.push(s, m, v),
                _ => {
                    return Err(Error::Parse {
                        line: i as u64 + 1,
                        message: "expected section,metric,value".into(),
                    })
                }
            }
        }
        Ok(table)
    }
}

/// `curve,fpr,tpr,threshold` rows for each named curve.
pub fn rocs_to_csv(curves: &[(String, &RocCurve)]) -> String {
    let mut out = String::from("curve,fpr,tpr,threshold\n");
    for (name, curve) in curves {
        for p in &curve.points {
            let _ = writeln!(out, "{name},{},{},{}", p.fpr, p.tpr, p.threshold);
        }
    }
    out
}

/// Inverse of [`rocs_to_csv`]; AUC is recomputed from the points by the trapezoid rule.
pub fn parse_rocs_csv(text: &str) -> Result<Vec<(String, RocCurve)>> {
    let mut curves: Vec<(String, RocCurve)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (i == 0 && line.starts_with("curve")) {
            continue;
        }
        let line_no = i as u64 + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 columns, found {}", cols.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad number {s:?}"),
            })
        };
        let point = crate::eval::RocPoint {
            fpr: num(cols[1])?,
            tpr: num(cols[2])?,
            threshold: num(cols[3])?,
        };
        match curves.last_mut() {
            Some((name, curve)) if name == cols[0] => curve.points.push(point),
            _ => curves.push((
                cols[0].to_string(),
                RocCurve {
                    points: vec![point],
                    auc: 0.0,
                },
            )),
        }
    }
    for (_, curve) in &mut curves {
        curve.auc = curve
            .points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum();
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::roc_auc;

    #[test]
    fn roc_csv_round_trip_keeps_auc() {
        let a = roc_auc(&[(0.9, true), (0.4, true), (0.6, false), (0.1, false)]).unwrap();
        let b = roc_auc(&[(0.3, true), (0.2, false)]).unwrap();
        let text = rocs_to_csv(&[("a".into(), &a), ("b".into(), &b)]);
        let back = parse_rocs_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1.points, a.points);
        assert!((back[0].1.auc - 0.75).abs() < 1e-12);
        assert_eq!(back[1].1.auc, 1.0);
    }

    #[test]
    fn metrics_table_round_trip() {
        let mut t = MetricsTable::default();
        t.push("frame", "auc", 0.5);
        t.push("run", "criterion", "iou>=0.5");
        let back = MetricsTable::parse_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.get_f64("frame", "auc"), Some(0.5));
    }
}
