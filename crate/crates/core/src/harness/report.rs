//! CSV output. Every row type carries the hash of the config that produced it.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// One aggregated metric, e.g. PSNR of one model at one upscaling factor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub config_hash: String,
    pub experiment: String,
    pub model: String,
    pub seed: u64,
    pub eps: f64,
    pub scale: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricRow {
    pub fn from_report(ctx: &RowContext, scale: usize, r: &MetricReport) -> Self {
        Self {
            config_hash: ctx.config_hash.clone(),
            experiment: ctx.experiment.clone(),
            model: ctx.model.clone(),
            seed: ctx.seed,
            eps: ctx.eps,
            scale,
            metric: r.metric.clone(),
            mean: r.mean,
            std: r.std,
            n: r.values.len(),
        }
    }
}

/// Identifies the run a group of rows belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct RowContext {
    pub config_hash: String,
    pub experiment: String,
    pub model: String,
    pub seed: u64,
    pub eps: f64,
}

/// One robustness-grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub config_hash: String,
    pub experiment: String,
    pub seed: u64,
    pub eps: f64,
    pub clean_acc: f64,
    /// Accuracy under the cell's own attack (equals `clean_acc` at radius 0).
    pub robust_acc: f64,
    /// Accuracy under the largest attack of the grid.
    pub robust_acc_max_eps: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub featdist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub config_hash: String,
    pub stage: String,
    pub seed: u64,
    pub eps: f64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Per-sample anomaly scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyRow {
    pub config_hash: String,
    pub positive_class: u32,
    pub id: String,
    pub score: f64,
    pub pixel_score: f64,
    pub anomalous: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AurocRow {
    pub config_hash: String,
    pub positive_class: String,
    pub auroc: f64,
    pub pixel_auroc: f64,
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, csv_bytes(rows)?)?;
    Ok(())
}
