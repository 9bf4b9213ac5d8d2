//! Metric suite: RMSE, confusion-matrix rates, and Mann–Whitney AUC.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub accuracy: f64,
    pub ppv: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub npv: f64,
    pub f1: f64,
    pub auc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// Names of ratios that were 0/0 and reported as 0.
    pub undefined: Vec<String>,
}

impl MetricReport {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion-derived metrics; `auc` and `rmse` are left at 0.
pub fn confusion_metrics(labels: &[bool], predictions: &[bool]) -> Result<MetricReport> {
    if labels.len() != predictions.len() {
        return Err(Error::shape(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mut r = MetricReport::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (true, true) => r.tp += 1,
            (false, true) => r.fp += 1,
            (false, false) => r.tn += 1,
            (true, false) => r.fn_ += 1,
        }
    }
    let mut undef = Vec::new();
    r.accuracy = (r.tp + r.tn) as f64 / r.n() as f64;
    r.ppv = ratio(r.tp, r.tp + r.fp, "ppv", &mut undef);
    r.sensitivity = ratio(r.tp, r.tp + r.fn_, "sensitivity", &mut undef);
    r.specificity = ratio(r.tn, r.tn + r.fp, "specificity", &mut undef);
    r.npv = ratio(r.tn, r.tn + r.fn_, "npv", &mut undef);
    let ppv_ok = !undef.iter().any(|u| u == "ppv");
    let sens_ok = !undef.iter().any(|u| u == "sensitivity");
    if ppv_ok && sens_ok && r.ppv + r.sensitivity > 0.0 {
        r.f1 = 2.0 * r.ppv * r.sensitivity / (r.ppv + r.sensitivity);
    } else {
        undef.push("f1".into());
        r.f1 = 0.0;
    }
    r.undefined = undef;
    Ok(r)
}

/// Area under the ROC curve via the rank-sum statistic with midranks, so
/// tied scores between classes count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn rmse(targets: &[f64], predictions: &[f64]) -> Result<f64> {
    if targets.len() != predictions.len() {
        return Err(Error::shape(format!(
            "{} targets vs {} predictions",
            targets.len(),
            predictions.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mse = targets
        .iter()
        .zip(predictions)
        .map(|(t, p)| (t - p).powi(2))
        .sum::<f64>()
        / targets.len() as f64;
    Ok(mse.sqrt())
}

/// Full report from regression outputs: thresholded labels, continuous scores
/// and BMI values. AUC is left at 0 and flagged when only one class is present.
pub fn full_report(
    targets: &[f64],
    predictions: &[f64],
    labels: &[bool],
    predicted_labels: &[bool],
    scores: &[f64],
) -> Result<MetricReport> {
    let mut r = confusion_metrics(labels, predicted_labels)?;
    r.rmse = rmse(targets, predictions)?;
    match auc(scores, labels) {
        Ok(a) => r.auc = a,
        Err(Error::Invalid(_)) => r.undefined.push("auc".into()),
        Err(e) => return Err(e),
    }
    Ok(r)
}

/// Column order of metrics CSV files.
pub const METRIC_COLUMNS: [&str; 8] = [
    "rmse",
    "accuracy",
    "ppv",
    "sensitivity",
    "specificity",
    "npv",
    "f1",
    "auc",
];

impl MetricReport {
    pub fn values(&self) -> [f64; 8] {
        [
            self.rmse,
            self.accuracy,
            self.ppv,
            self.sensitivity,
            self.specificity,
            self.npv,
            self.f1,
            self.auc,
        ]
    }

    /// Field-wise arithmetic mean of several reports; counts are summed.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let mut undefined: Vec<String> = reports.iter().flat_map(|r| r.undefined.clone()).collect();
        undefined.sort();
        undefined.dedup();
        Some(MetricReport {
            rmse: avg(|r| r.rmse),
            accuracy: avg(|r| r.accuracy),
            ppv: avg(|r| r.ppv),
            sensitivity: avg(|r| r.sensitivity),
            specificity: avg(|r| r.specificity),
            npv: avg(|r| r.npv),
            f1: avg(|r| r.f1),
            auc: avg(|r| r.auc),
            tp: reports.iter().map(|r| r.tp).sum(),
            fp: reports.iter().map(|r| r.fp).sum(),
            tn: reports.iter().map(|r| r.tn).sum(),
            fn_: reports.iter().map(|r| r.fn_).sum(),
            undefined,
        })
    }
}

/// One line of a metrics CSV: a report tagged with its sub-cohort, model and
/// evaluation protocol. Pooled rows use "all" for window and age.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub window: String,
    pub prediction_age: String,
    pub model: String,
    pub protocol: String,
    pub report: MetricReport,
}

const ROW_KEYS: [&str; 5] = ["window", "prediction_age", "model", "protocol", "n"];
const COUNT_KEYS: [&str; 4] = ["tp", "fp", "tn", "fn"];

pub fn metrics_header() -> Vec<String> {
    ROW_KEYS
        .iter()
        .chain(METRIC_COLUMNS.iter())
        .chain(COUNT_KEYS.iter())
        .chain(["undefined"].iter())
        .map(|s| s.to_string())
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(metrics_header()).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let m = &r.report;
        let mut rec = vec![r.window.clone(), r.prediction_age.clone(), r.model.clone(), r.protocol.clone(), m.n().to_string()];
        rec.extend(m.values().iter().map(|v| v.to_string()));
        rec.extend([m.tp, m.fp, m.tn, m.fn_].iter().map(|v| v.to_string()));
        rec.push(m.undefined.join(";"));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            message: format!("malformed metrics row ({} fields)", rec.len()),
        };
        if rec.len() != metrics_header().len() {
            return Err(bad());
        }
        let f = |j: usize| rec[j].parse::<f64>().map_err(|_| bad());
        let u = |j: usize| rec[j].parse::<usize>().map_err(|_| bad());
        let undefined = if rec[17].is_empty() {
            Vec::new()
        } else {
            rec[17].split(';').map(str::to_string).collect()
        };
        out.push(MetricRow {
            window: rec[0].to_string(),
            prediction_age: rec[1].to_string(),
            model: rec[2].to_string(),
            protocol: rec[3].to_string(),
            report: MetricReport {
                rmse: f(5)?,
                accuracy: f(6)?,
                ppv: f(7)?,
                sensitivity: f(8)?,
                specificity: f(9)?,
                npv: f(10)?,
                f1: f(11)?,
                auc: f(12)?,
                tp: u(13)?,
                fp: u(14)?,
                tn: u(15)?,
                fn_: u(16)?,
                undefined,
            },
        });
    }
    Ok(out)
}
