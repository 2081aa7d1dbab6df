//! Confusion matrices, the five evaluation metrics, confusion-matrix
//! reconstruction from published sensitivity/specificity, and report
//! rendering. Pneumonia is the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts `(prediction, label)` pairs over `{0 = Normal, 1 = Pneumonia}`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&p, &l)) in predictions.iter().zip(labels).enumerate() {
        match (p, l) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fn_ += 1,
            _ => return Err(Error::validation(format!("pair {i} = ({p}, {l}) is outside {{0, 1}}"))),
        }
    }
    Ok(cm)
}

/// Metric values; a sub-metric whose denominator is zero is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub p_o: f64,
    pub p_e: f64,
    pub n: u64,
    /// Set when chance agreement is 1 and kappa is fixed by convention.
    pub kappa_degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::validation("confusion matrix is empty"));
    }
    let nf = n as f64;
    let p_o = (cm.tp + cm.tn) as f64 / nf;
    let p_e = ((cm.tp + cm.fp) as f64 * (cm.tp + cm.fn_) as f64 + (cm.tn + cm.fn_) as f64 * (cm.tn + cm.fp) as f64)
        / (nf * nf);
    let (kappa, kappa_degenerate) = if p_e == 1.0 {
        (if p_o == 1.0 { 1.0 } else { 0.0 }, true)
    } else {
        ((p_o - p_e) / (1.0 - p_e), false)
    };
    Ok(MetricsReport {
        accuracy: p_o,
        kappa,
        sensitivity: ratio(cm.tp, cm.positives()),
        specificity: ratio(cm.tn, cm.negatives()),
        ppv: ratio(cm.tp, cm.tp + cm.fp),
        p_o,
        p_e,
        n,
        kappa_degenerate,
    })
}

/// Rebuilds the confusion matrix behind a (sensitivity, specificity) pair
/// given the class sizes: `TP = round(sens·P)`, `TN = round(spec·N)`.
pub fn invert_metrics(sensitivity: f64, specificity: f64, positives: u64, negatives: u64) -> Result<ConfusionMatrix> {
    for (name, v) in [("sensitivity", sensitivity), ("specificity", specificity)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Inversion(format!("{name} {v} outside [0, 1]")));
        }
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::Inversion(format!("class sizes must be positive, got P={positives} N={negatives}")));
    }
    let tp = (sensitivity * positives as f64).round();
    let tn = (specificity * negatives as f64).round();
    if tp < 0.0 || tn < 0.0 || tp > positives as f64 || tn > negatives as f64 {
        return Err(Error::Inversion(format!("rounding produced negative counts (TP={tp}, TN={tn})")));
    }
    let (tp, tn) = (tp as u64, tn as u64);
    Ok(ConfusionMatrix::new(tp, negatives - tn, tn, positives - tp))
}

/// Test-set class sizes: 390 pneumonia, 234 normal.
pub const TEST_POSITIVES: u64 = 390;
pub const TEST_NEGATIVES: u64 = 234;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PublishedRow {
    pub model: &'static str,
    pub accuracy: f64,
    pub kappa: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
}

/// Published comparison table, rows in their original order.
pub const PUBLISHED: [PublishedRow; 4] = [
    PublishedRow { model: "ResNet34", accuracy: 0.9407, kappa: 0.8696, sensitivity: 0.9974, specificity: 0.8461, ppv: 0.9152 },
    PublishedRow { model: "vit_tiny_patch16", accuracy: 0.9407, kappa: 0.8698, sensitivity: 0.9948, specificity: 0.8504, ppv: 0.9172 },
    PublishedRow { model: "swin_tiny_patch4_window7", accuracy: 0.9455, kappa: 0.8804, sensitivity: 0.9974, specificity: 0.8589, ppv: 0.9218 },
    PublishedRow { model: "Resnet34 + maxvit_small", accuracy: 0.9487, kappa: 0.8875, sensitivity: 1.0, specificity: 0.8632, ppv: 0.92417 },
];

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "kappa", "sensitivity", "specificity", "ppv"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellCheck {
    pub metric: &'static str,
    pub published: f64,
    pub computed: Option<f64>,
    pub diff: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowCheck {
    pub model: &'static str,
    pub cm: ConfusionMatrix,
    pub cells: Vec<CellCheck>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableCheck {
    pub tolerance: f64,
    pub rows: Vec<RowCheck>,
    pub pass: bool,
}

impl MetricsReport {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 5] {
        [Some(self.accuracy), Some(self.kappa), self.sensitivity, self.specificity, self.ppv]
    }
}

/// Inverts every published row with the test-set sizes, recomputes all five
/// metrics and compares each cell within `tolerance`.
pub fn reproduce_table(tolerance: f64) -> Result<TableCheck> {
    if !(tolerance >= 0.0) {
        return Err(Error::Usage(format!("tolerance must be non-negative, got {tolerance}")));
    }
    let mut rows = Vec::new();
    for row in PUBLISHED {
        let cm = invert_metrics(row.sensitivity, row.specificity, TEST_POSITIVES, TEST_NEGATIVES)?;
        let computed = compute_metrics(&cm)?.values();
        let published = [row.accuracy, row.kappa, row.sensitivity, row.specificity, row.ppv];
        let cells: Vec<CellCheck> = METRIC_NAMES
            .iter()
            .zip(published)
            .zip(computed)
            .map(|((&metric, published), computed)| {
                let diff = computed.map(|c| (c - published).abs());
                CellCheck { metric, published, computed, diff, pass: diff.is_some_and(|d| d <= tolerance) }
            })
            .collect();
        let pass = cells.iter().all(|c| c.pass);
        rows.push(RowCheck { model: row.model, cm, cells, pass });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(TableCheck { tolerance, rows, pass })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Format::Text),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Usage(format!("unknown format {s:?} (expected text, csv or json)"))),
        }
    }
}

/// One named model's evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportEntry {
    pub model: String,
    pub cm: ConfusionMatrix,
    pub metrics: MetricsReport,
}

impl ReportEntry {
    pub fn new(model: impl Into<String>, cm: ConfusionMatrix) -> Result<Self> {
        let model = model.into();
        let model = if model.trim().is_empty() { "unnamed".to_string() } else { model };
        Ok(Self { model, metrics: compute_metrics(&cm)?, cm })
    }
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |v| format!("{v:.4}"))
}

#[derive(Serialize)]
struct JsonEntry<'a> {
    model: &'a str,
    accuracy: f64,
    kappa: f64,
    sensitivity: Option<f64>,
    specificity: Option<f64>,
    ppv: Option<f64>,
    cm: ConfusionMatrix,
}

/// Renders the metric table plus a 2×2 count block per model.
pub fn render_report(entries: &[ReportEntry], format: Format) -> Result<String> {
    if entries.is_empty() {
        return Err(Error::validation("report needs at least one entry"));
    }
    match format {
        Format::Text => {
            let width = entries.iter().map(|e| e.model.len()).max().unwrap_or(5).max(5);
            let mut out = format!("{:<width$}  Accuracy  Kappa  Sensitivity  Specificity  PPV\n", "Model");
            for e in entries {
                let cells: Vec<String> = e.metrics.values().iter().map(|&v| fmt4(v)).collect();
                out.push_str(&format!("{:<width$}  {}\n", e.model, cells.join("  ")));
            }
            for e in entries {
                out.push_str(&format!(
                    "\n{} confusion matrix (rows actual, columns predicted)\n\
                     {:>10}  {:>9}  {:>9}\n\
                     {:>10}  {:>9}  {:>9}\n\
                     {:>10}  {:>9}  {:>9}\n",
                    e.model, "", "NORMAL", "PNEUMONIA", "NORMAL", e.cm.tn, e.cm.fp, "PNEUMONIA", e.cm.fn_, e.cm.tp
                ));
            }
            Ok(out)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["Model", "Accuracy", "Kappa", "Sensitivity", "Specificity", "PPV", "TP", "FP", "TN", "FN"])?;
            for e in entries {
                let mut rec = vec![e.model.clone()];
                rec.extend(e.metrics.values().iter().map(|&v| fmt4(v)));
                rec.extend([e.cm.tp, e.cm.fp, e.cm.tn, e.cm.fn_].iter().map(u64::to_string));
                w.write_record(&rec)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            String::from_utf8(bytes).map_err(|e| Error::validation(e.to_string()))
        }
        Format::Json => {
            let rows: Vec<JsonEntry> = entries
                .iter()
                .map(|e| JsonEntry {
                    model: &e.model,
                    accuracy: round4(e.metrics.accuracy),
                    kappa: round4(e.metrics.kappa),
                    sensitivity: e.metrics.sensitivity.map(round4),
                    specificity: e.metrics.specificity.map(round4),
                    ppv: e.metrics.ppv.map(round4),
                    cm: e.cm,
                })
                .collect();
            Ok(serde_json::to_string_pretty(&rows)? + "\n")
        }
    }
}

/// Computed-vs-published listing for [`reproduce_table`].
pub fn render_table_check(check: &TableCheck, format: Format) -> Result<String> {
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(check)? + "\n"),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["Model", "Metric", "Published", "Computed", "Diff", "Pass", "TP", "FP", "TN", "FN"])?;
            for r in &check.rows {
                for c in &r.cells {
                    w.write_record([
                        r.model.to_string(),
                        c.metric.to_string(),
                        format!("{}", c.published),
                        fmt4(c.computed),
                        c.diff.map_or_else(|| "undef".into(), |d| format!("{d:.6}")),
                        c.pass.to_string(),
                        r.cm.tp.to_string(),
                        r.cm.fp.to_string(),
                        r.cm.tn.to_string(),
                        r.cm.fn_.to_string(),
                    ])?;
                }
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            String::from_utf8(bytes).map_err(|e| Error::validation(e.to_string()))
        }
        Format::Text => {
            let mut out = String::new();
            for r in &check.rows {
                out.push_str(&format!(
                    "{}  {}  cm(tp={}, fp={}, tn={}, fn={})\n",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.model,
                    r.cm.tp,
                    r.cm.fp,
                    r.cm.tn,
                    r.cm.fn_
                ));
                for c in &r.cells {
                    out.push_str(&format!(
                        "    {:<12} published {:<8} computed {}  diff {}{}\n",
                        c.metric,
                        c.published,
                        fmt4(c.computed),
                        c.diff.map_or_else(|| "undef".into(), |d| format!("{d:.6}")),
                        if c.pass { "" } else { "  MISMATCH" }
                    ));
                }
            }
            out.push_str(&format!(
                "{} (tolerance {})\n",
                if check.pass { "all cells match" } else { "cells differ" },
                check.tolerance
            ));
            Ok(out)
        }
    }
}
