//! Confusion matrix, per-class precision and recall, accuracy and report
//! rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }
}

/// Generic names `class0..classK` unless `K` matches the four OCT classes.
pub fn default_class_names(k: usize) -> Vec<String> {
    if k == crate::data::NUM_CLASSES {
        crate::data::CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(default_class_names(k));
    for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
        if t >= k || p >= k {
            return Err(Error::Contract(format!(
                "label pair ({t}, {p}) at index {i} outside 0..{k}"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn precision_recall(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.num_classes())
        .map(|k| ClassScores {
            precision: ratio(cm.counts[k][k], cm.col_sum(k)),
            recall: ratio(cm.counts[k][k], cm.row_sum(k)),
        })
        .collect()
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub head: String,
    pub samples: u64,
    pub accuracy: f64,
    pub classes: Vec<ClassReport>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_matrix(model: &str, head: &str, cm: &ConfusionMatrix) -> Result<Self> {
        let classes = cm
            .class_names
            .iter()
            .zip(precision_recall(cm))
            .map(|(name, s)| ClassReport {
                name: name.clone(),
                precision: s.precision,
                recall: s.recall,
            })
            .collect();
        Ok(EvalReport {
            model: model.to_string(),
            head: head.to_string(),
            samples: cm.total(),
            accuracy: accuracy(cm)?,
            classes,
            confusion: cm.counts.clone(),
        })
    }
}

/// Two decimals, half up. Undefined values render as `n/a`.
pub fn format_ratio(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.2}", (v * 100.0).round() / 100.0),
        None => "n/a".to_string(),
    }
}

/// Integer percent, half up.
pub fn format_percent(value: f64) -> String {
    format!("{}%", (value * 100.0).round() as i64)
}

/// Class order for summary lines: normal, diabetic retinopathy, central
/// serous retinopathy, macular hole.
pub const SUMMARY_ORDER: [usize; 4] = [3, 1, 0, 2];

/// `(precision, recall, accuracy)` strings with classes in `order` joined by `/`.
pub fn summary_strings(report: &EvalReport, order: &[usize]) -> Result<(String, String, String)> {
    let pick = |f: fn(&ClassReport) -> Option<f64>| -> Result<String> {
        let parts = order
            .iter()
            .map(|&k| {
                report
                    .classes
                    .get(k)
                    .map(|c| format_ratio(f(c)))
                    .ok_or_else(|| Error::Param(format!("class index {k} not in report")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.join("/"))
    };
    Ok((
        pick(|c| c.precision)?,
        pick(|c| c.recall)?,
        format_percent(report.accuracy),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "text" => Ok(ReportFormat::Text),
            other => Err(Error::Param(format!(
                "unknown report format `{other}` (expected json, csv or text)"
            ))),
        }
    }
}

fn csv_value(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_report(report: &EvalReport, format: &str) -> Result<String> {
    match format.parse::<ReportFormat>()? {
        ReportFormat::Json => serde_json::to_string_pretty(report)
            .map_err(|e| Error::Contract(format!("report serialization: {e}"))),
        ReportFormat::Csv => {
            let mut out = String::from("class,precision,recall,accuracy\n");
            for c in &report.classes {
                out += &format!(
                    "{},{},{},\n",
                    c.name,
                    csv_value(c.precision),
                    csv_value(c.recall)
                );
            }
            out += &format!("overall,,,{}\n", report.accuracy);
            Ok(out)
        }
        ReportFormat::Text => {
            let width = report.classes.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
            let mut out = format!(
                "model: {}  head: {}  samples: {}\n{:<width$}  precision  recall\n",
                report.model, report.head, report.samples, "class"
            );
            for c in &report.classes {
                out += &format!(
                    "{:<width$}  {:>9}  {:>6}\n",
                    c.name,
                    format_ratio(c.precision),
                    format_ratio(c.recall)
                );
            }
            out += &format!("accuracy: {}\n", format_percent(report.accuracy));
            Ok(out)
        }
    }
}
