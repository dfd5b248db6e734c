//! Report emission: per-image CSV, aggregate JSON, pairwise method comparison
//! and boundary overlays.

use std::collections::BTreeSet;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use super::hausdorff::boundary;
use super::stats::{mann_whitney_u, MannWhitneyResult};
use super::{EvaluationReport, Metric, MetricsRecord};
use crate::data::{BinaryMask, ImagePatch};
use crate::error::{Error, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Evaluation(format!("{}: {e}", path.display()))
}

/// Writes `image_id,dice,iou,tpr,fpr,f1,hd,hd_empty_mask`, one row per image.
pub fn write_records_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Evaluation(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `metrics.csv` plus `summary.json` in `dir`.
pub fn write_evaluation(report: &EvaluationReport, dir: &Path) -> Result<()> {
    write_records_csv(&report.records, &dir.join("metrics.csv"))?;
    #[derive(Serialize)]
    struct SummaryFile<'a> {
        threshold: f64,
        count: usize,
        metrics: &'a [super::MetricSummary],
        /// FPR is reported unscaled (not x10^-1).
        fpr_scale: f64,
    }
    write_json(
        &SummaryFile {
            threshold: report.threshold,
            count: report.summary.count,
            metrics: &report.summary.metrics,
            fpr_scale: 1.0,
        },
        &dir.join("summary.json"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub metric: Metric,
    pub method_a: String,
    pub method_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub median_a: f64,
    pub median_b: f64,
    #[serde(flatten)]
    pub test: MannWhitneyResult,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Mann–Whitney U for every unordered pair of methods and every metric.
pub fn compare_methods(methods: &[(String, Vec<MetricsRecord>)], metrics: &[Metric]) -> Result<Vec<PairwiseComparison>> {
    if methods.len() < 2 {
        return Err(Error::Config("comparison needs at least two methods".into()));
    }
    let mut out = Vec::new();
    for &metric in metrics {
        for i in 0..methods.len() {
            for j in i + 1..methods.len() {
                let a: Vec<f64> = methods[i].1.iter().map(|r| r.value(metric)).collect();
                let b: Vec<f64> = methods[j].1.iter().map(|r| r.value(metric)).collect();
                let test = mann_whitney_u(&a, &b)?;
                out.push(PairwiseComparison {
                    metric,
                    method_a: methods[i].0.clone(),
                    method_b: methods[j].0.clone(),
                    n_a: a.len(),
                    n_b: b.len(),
                    median_a: median(&a),
                    median_b: median(&b),
                    test,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_comparisons_csv(rows: &[PairwiseComparison], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["metric", "method_a", "method_b", "n_a", "n_b", "median_a", "median_b", "u", "p_value", "label", "method"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        let method = match r.test.method {
            super::stats::PValueMethod::Exact => "exact",
            super::stats::PValueMethod::NormalApprox => "normal_approx",
        };
        w.write_record([
            r.metric.name().to_string(),
            r.method_a.clone(),
            r.method_b.clone(),
            r.n_a.to_string(),
            r.n_b.to_string(),
            r.median_a.to_string(),
            r.median_b.to_string(),
            r.test.u.to_string(),
            r.test.p_value.to_string(),
            r.test.label.clone(),
            method.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Box-plot table for one metric: one row per image id, one column per
/// method; blank where a method lacks the image.
pub fn write_boxplot_csv(methods: &[(String, Vec<MetricsRecord>)], metric: Metric, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let ids: BTreeSet<&str> = methods
        .iter()
        .flat_map(|(_, recs)| recs.iter().map(|r| r.image_id.as_str()))
        .collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["image_id".to_string()];
    header.extend(methods.iter().map(|(name, _)| name.clone()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for id in ids {
        let mut row = vec![id.to_string()];
        for (_, recs) in methods {
            row.push(
                recs.iter()
                    .find(|r| r.image_id == id)
                    .map(|r| r.value(metric).to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// RGB rendering of `patch` with the boundary of `mask` painted in `color`.
pub fn render_overlay(patch: &ImagePatch, mask: &BinaryMask, color: [u8; 3]) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    if patch.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "patch {:?} vs mask {:?}",
            patch.shape(),
            mask.shape()
        )));
    }
    let (h, w) = patch.shape();
    let c = patch.channels();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if c == 1 {
            let g = q(patch.pixels[[0, y, x]]);
            Rgb([g, g, g])
        } else {
            Rgb([q(patch.pixels[[0, y, x]]), q(patch.pixels[[1, y, x]]), q(patch.pixels[[2, y, x]])])
        }
    });
    for (y, x) in boundary(mask) {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
    Ok(img)
}

pub fn save_overlay(patch: &ImagePatch, mask: &BinaryMask, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    render_overlay(patch, mask, [0, 0, 255])?
        .save(path)
        .map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))
}
