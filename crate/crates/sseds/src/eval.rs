//! Metrics and report generation: AUC, logloss, parameter counting, and
//! the saliency/dimension distribution report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PROB_CLAMP;

/// AUC via the Mann-Whitney rank statistic with midrank tie handling.
pub fn auc(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::data("auc: length mismatch"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("undefined AUC: single-class labels"));
    }
    let mut idx: Vec<usize> = (0..predictions.len()).collect();
    idx.sort_by(|&a, &b| predictions[a].partial_cmp(&predictions[b]).unwrap());

    // midranks over tied prediction groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && predictions[idx[j + 1]] == predictions[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean cross-entropy with the model's clamping convention.
pub fn logloss(predictions: &[f64], labels: &[u8]) -> f64 {
    let n = predictions.len().max(1) as f64;
    predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Sum of n_i * d_i over (n, d) table shapes.
pub fn count_params(shapes: &[(usize, usize)]) -> usize {
    shapes.iter().map(|&(n, d)| n * d).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub auc: f64,
    pub logloss: f64,
    pub param_count: usize,
    pub embedding_param_count: usize,
}

/// Wall-clock per stage, written to a separate file so the deterministic
/// report set stays byte-reproducible.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_ms: u128,
    pub forward_backward_passes: u64,
    pub forward_only_passes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldDimReport {
    pub field_id: usize,
    pub name: String,
    pub n: usize,
    pub original_dim: usize,
    pub searched_dim: usize,
    pub kept_dims: Vec<u32>,
}

/// The data behind the saliency/dimension distribution figures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub schema_version: u32,
    pub kappa: f64,
    pub total_embedding_params: usize,
    pub kept_embedding_params: usize,
    pub threshold: f64,
    pub forward_backward_passes: u64,
    /// One entry per original field; removed fields have searched_dim 0.
    pub fields: Vec<FieldDimReport>,
    pub removed_fields: Vec<usize>,
    /// Full m x d saliency matrix.
    pub saliency: Vec<Vec<f64>>,
    /// Saliency values sorted descending.
    pub sorted_saliency: Vec<f64>,
    /// Histogram of saliency values over `histogram_bins` equal-width bins
    /// spanning [0, max].
    pub histogram: Vec<usize>,
    pub histogram_bin_width: f64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const HISTOGRAM_BINS: usize = 20;

pub fn saliency_histogram(saliency: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let max = saliency
        .iter()
        .flatten()
        .copied()
        .fold(0.0_f64, f64::max);
    let width = if max > 0.0 { max / HISTOGRAM_BINS as f64 } else { 1.0 };
    let mut bins = vec![0usize; HISTOGRAM_BINS];
    for &s in saliency.iter().flatten() {
        let b = ((s / width) as usize).min(HISTOGRAM_BINS - 1);
        bins[b] += 1;
    }
    (bins, width)
}

/// Write `report.json`, `saliency.csv` and `dims.csv` to `out_dir`.
pub fn write_report(report: &PruneReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(out_dir.join("report.json"), json)?;

    let mut sal = String::from("field_id,dim,s,kept\n");
    for (i, row) in report.saliency.iter().enumerate() {
        let kept_dims: &[u32] = report
            .fields
            .iter()
            .find(|f| f.field_id == i)
            .map(|f| f.kept_dims.as_slice())
            .unwrap_or(&[]);
        for (j, &s) in row.iter().enumerate() {
            let kept = kept_dims.contains(&(j as u32));
            sal.push_str(&format!("{i},{j},{s},{}\n", u8::from(kept)));
        }
    }
    std::fs::write(out_dir.join("saliency.csv"), sal)?;

    let mut dims = String::from("field_id,n_i,d_i\n");
    for f in &report.fields {
        dims.push_str(&format!("{},{},{}\n", f.field_id, f.n, f.searched_dim));
    }
    std::fs::write(out_dir.join("dims.csv"), dims)?;
    Ok(())
}
