use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// Detection counts and the rates derived from them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Point accuracy; only the TuSimple scorer fills it.
    pub accuracy: Option<f64>,
    pub fpr: f64,
    pub fnr: f64,
    pub categories: BTreeMap<String, MetricsReport>,
    pub fps: Option<f64>,
    pub fps_spread: Option<f64>,
    pub macs: Option<u64>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl MetricsReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let (t, p, n) = (tp as f64, fp as f64, fn_ as f64);
        let precision = ratio(t, t + p);
        let recall = ratio(t, t + n);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
            fpr: p / (t + p).max(1.0),
            fnr: n / (t + n).max(1.0),
            ..Default::default()
        }
    }

    pub fn predictions(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn ground_truths(&self) -> u64 {
        self.tp + self.fn_
    }

    /// `key=value` lines; categories appear as `category.<name>.<key>`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        self.write_keys(&mut out, "");
        for (name, r) in &self.categories {
            r.write_keys(&mut out, &format!("category.{name}."));
        }
        out
    }

    fn write_keys(&self, out: &mut String, prefix: &str) {
        let _ = writeln!(out, "{prefix}tp={}", self.tp);
        let _ = writeln!(out, "{prefix}fp={}", self.fp);
        let _ = writeln!(out, "{prefix}fn={}", self.fn_);
        let _ = writeln!(out, "{prefix}precision={}", self.precision);
        let _ = writeln!(out, "{prefix}recall={}", self.recall);
        let _ = writeln!(out, "{prefix}f1={}", self.f1);
        if let Some(a) = self.accuracy {
            let _ = writeln!(out, "{prefix}accuracy={a}");
        }
        let _ = writeln!(out, "{prefix}fpr={}", self.fpr);
        let _ = writeln!(out, "{prefix}fnr={}", self.fnr);
        if let Some(f) = self.fps {
            let _ = writeln!(out, "{prefix}fps={f}");
        }
        if let Some(s) = self.fps_spread {
            let _ = writeln!(out, "{prefix}fps_spread={s}");
        }
        if let Some(m) = self.macs {
            let _ = writeln!(out, "{prefix}macs={m}");
        }
    }

    pub const CSV_HEADER: &'static str = "name,tp,fp,fn,precision,recall,f1,accuracy,fpr,fnr";

    /// Header plus one row for the totals (`all`) and one per category.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        self.csv_row(&mut out, "all");
        for (name, r) in &self.categories {
            r.csv_row(&mut out, name);
        }
        out
    }

    fn csv_row(&self, out: &mut String, name: &str) {
        let acc = self.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{},{acc},{},{}",
            self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1, self.fpr, self.fnr
        );
    }
}
