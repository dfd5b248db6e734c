//! Pixel-level segmentation metrics, per-image evaluation and aggregation.
//!
//! Degenerate denominators follow fixed conventions: Dice, IoU and F1 are 1
//! when prediction and truth are both empty and 0 when exactly one is; TPR is
//! 1 without true foreground; FPR is 0 without true background.

pub mod hausdorff;
pub mod report;
pub mod stats;

use std::path::{Path, PathBuf};

use ndarray::Zip;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_prob_map, BinaryMask, DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
pub use hausdorff::{hausdorff, HausdorffResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    Zip::from(&pred.pixels).and(&truth.pixels).for_each(|&p, &t| match (p, t) {
        (1, 1) => c.tp += 1,
        (1, _) => c.fp += 1,
        (_, 1) => c.fn_ += 1,
        _ => c.tn += 1,
    });
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    num as f64 / den as f64
}

/// `2 tp / (2 tp + fp + fn)`.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        ratio(2 * c.tp, den)
    }
}

/// `tp / (tp + fp + fn)`.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        ratio(c.tp, den)
    }
}

/// Recall, `tp / (tp + fn)`.
pub fn tpr(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fn_;
    if den == 0 {
        1.0
    } else {
        ratio(c.tp, den)
    }
}

/// `fp / (fp + tn)`.
pub fn fpr(c: &ConfusionCounts) -> f64 {
    let den = c.fp + c.tn;
    if den == 0 {
        0.0
    } else {
        ratio(c.fp, den)
    }
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp;
    if den == 0 {
        1.0
    } else {
        ratio(c.tp, den)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Harmonic mean of precision and recall.
///
/// Evaluated over exact integer ratios and rounded once, so for binary
/// pixel counts it coincides bit-for-bit with [`dice`].
pub fn f1(c: &ConfusionCounts) -> f64 {
    let (tp, fp, fn_) = (u128::from(c.tp), u128::from(c.fp), u128::from(c.fn_));
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    // 2 P R / (P + R) with P = tp/(tp+fp), R = tp/(tp+fn)
    let num = 2 * tp * tp;
    let den = tp * (tp + fn_) + tp * (tp + fp);
    let g = gcd(num, den);
    (num / g) as f64 / (den / g) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub image_id: String,
    pub dice: f64,
    pub iou: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
    /// Pixels.
    pub hd: f64,
    /// Exactly one of the masks was empty; `hd` is the image diagonal.
    pub hd_empty_mask: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dice,
    Iou,
    Tpr,
    Fpr,
    F1,
    Hd,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Dice, Metric::Iou, Metric::Tpr, Metric::Fpr, Metric::F1, Metric::Hd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Iou => "iou",
            Metric::Tpr => "tpr",
            Metric::Fpr => "fpr",
            Metric::F1 => "f1",
            Metric::Hd => "hd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

impl MetricsRecord {
    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Dice => self.dice,
            Metric::Iou => self.iou,
            Metric::Tpr => self.tpr,
            Metric::Fpr => self.fpr,
            Metric::F1 => self.f1,
            Metric::Hd => self.hd,
        }
    }
}

pub fn compute_metrics(image_id: &str, pred: &BinaryMask, truth: &BinaryMask) -> Result<MetricsRecord> {
    let c = confusion(pred, truth)?;
    let hd = hausdorff(pred, truth)?;
    Ok(MetricsRecord {
        image_id: image_id.to_string(),
        dice: dice(&c),
        iou: iou(&c),
        tpr: tpr(&c),
        fpr: fpr(&c),
        f1: f1(&c),
        hd: hd.distance,
        hd_empty_mask: hd.empty_mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); 0 for a single record.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub metrics: Vec<MetricSummary>,
}

impl Summary {
    pub fn get(&self, metric: Metric) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == metric)
    }
}

/// Mean and sample standard deviation of a slice (Welford).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let std = if values.len() > 1 {
        (m2 / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let metrics = Metric::ALL
        .into_iter()
        .map(|metric| {
            let values: Vec<f64> = records.iter().map(|r| r.value(metric)).collect();
            let (mean, std) = mean_std(&values);
            MetricSummary { metric, mean, std }
        })
        .collect();
    Summary {
        count: records.len(),
        metrics,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub threshold: f64,
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

const PREDICTION_EXTENSIONS: &[&str] = &["png", "tif", "tiff"];

/// Finds `<dir>/<id>.{png,tif,tiff}`.
pub fn find_prediction(dir: &Path, id: &str) -> Option<PathBuf> {
    PREDICTION_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Evaluates one prediction raster per labeled record of `split`.
/// Predictions (probability maps or binary masks) are binarized at
/// `p >= threshold`.
pub fn evaluate_split(pred_dir: &Path, truth: &DatasetManifest, split: Split, threshold: f64) -> Result<EvaluationReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let records: Vec<&ManifestRecord> = truth.split(split).collect();
    if let Some(r) = records.iter().find(|r| !r.is_labeled()) {
        return Err(Error::Evaluation(format!("{split} record {} has no ground-truth label", r.id())));
    }
    let missing: Vec<String> = records
        .iter()
        .map(|r| r.id())
        .filter(|id| find_prediction(pred_dir, id).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "missing predictions in {} for: {}",
            pred_dir.display(),
            missing.join(", ")
        )));
    }
    let per_image: Result<Vec<MetricsRecord>> = records
        .par_iter()
        .map(|r| {
            let id = r.id();
            let path = find_prediction(pred_dir, &id).expect("checked above");
            let pred = load_prob_map(&path)?.threshold(threshold);
            let truth_mask = truth.load_target(r)?;
            compute_metrics(&id, &pred, &truth_mask)
        })
        .collect();
    let mut per_image = per_image?;
    per_image.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let summary = summarize(&per_image);
    Ok(EvaluationReport {
        threshold,
        records: per_image,
        summary,
    })
}

/// [`evaluate_split`] on the test split.
pub fn evaluate_set(pred_dir: &Path, truth: &DatasetManifest, threshold: f64) -> Result<EvaluationReport> {
    evaluate_split(pred_dir, truth, Split::Test, threshold)
}
