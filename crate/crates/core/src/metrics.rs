//! Pixel-level scoring of binary change maps.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster_io::GroundTruthMask;

/// Confusion counts and derived scores. Ratios with a zero denominator are
/// reported as 0 and listed in `degenerate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub excluded_pixels: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64, excluded_pixels: u64) -> Self {
        let mut degenerate = Vec::new();
        let precision = ratio(tp, tp + fp, "precision", &mut degenerate);
        let recall = ratio(tp, tp + fn_, "recall", &mut degenerate);
        // F1 = TP / (TP + (FP + FN) / 2), written over integers
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_, "f1", &mut degenerate);
        let iou = ratio(tp, tp + fp + fn_, "iou", &mut degenerate);
        MetricsReport {
            tp,
            fp,
            fn_,
            tn,
            excluded_pixels,
            precision,
            recall,
            f1,
            iou,
            degenerate,
        }
    }

    pub fn total_pixels(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn + self.excluded_pixels
    }

    pub fn is_degenerate(&self) -> bool {
        !self.degenerate.is_empty()
    }
}

/// F1 from precision and recall (harmonic mean), 0 when both are 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// IoU implied by an F1 score.
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

/// Scores a predicted mask against ground truth; pixels labelled -1 are skipped.
pub fn score(pred: &Array2<bool>, gt: &GroundTruthMask) -> Result<MetricsReport> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn, mut excluded) = (0, 0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt.labels().iter()) {
        match (g, p) {
            (-1, _) => excluded += 1,
            (1, true) => tp += 1,
            (1, false) => fn_ += 1,
            (_, true) => fp += 1,
            (_, false) => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn, excluded))
}

/// Macro (mean of per-report scores) and pooled (scores of summed counts) averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub reports: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub pooled: MetricsReport,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateMetrics> {
    if reports.is_empty() {
        return Err(Error::Empty("metrics report list"));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let sum = |f: fn(&MetricsReport) -> u64| reports.iter().map(f).sum::<u64>();
    Ok(AggregateMetrics {
        reports: reports.len(),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        iou: mean(|r| r.iou),
        pooled: MetricsReport::from_counts(
            sum(|r| r.tp),
            sum(|r| r.fp),
            sum(|r| r.fn_),
            sum(|r| r.tn),
            sum(|r| r.excluded_pixels),
        ),
    })
}

/// Writes a `Site,R,P,F1,IoU` table in percent with a trailing macro-average row.
pub fn write_table<W: Write>(out: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["Site", "R", "P", "F1", "IoU"])?;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    for (site, r) in rows {
        writer.write_record([
            site.clone(),
            pct(r.recall),
            pct(r.precision),
            pct(r.f1),
            pct(r.iou),
        ])?;
    }
    if !rows.is_empty() {
        let reports: Vec<_> = rows.iter().map(|(_, r)| r.clone()).collect();
        let avg = aggregate(&reports)?;
        writer.write_record([
            "Average".to_string(),
            pct(avg.recall),
            pct(avg.precision),
            pct(avg.f1),
            pct(avg.iou),
        ])?;
    }
    writer.flush().map_err(|e| Error::io("<table>", e))?;
    Ok(())
}
