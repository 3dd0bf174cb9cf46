//! Metrics and distribution analysis for score predictions.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DatasetManifest;
use crate::scoring::{ImageSource, Scorer};

/// Number of points in every KDE grid.
pub const KDE_GRID_POINTS: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooFew(usize),
    #[error("undefined ρ: {0} vector is constant")]
    UndefinedRho(&'static str),
    #[error("empty input")]
    Empty,
    #[error("invalid bandwidth {0}")]
    Bandwidth(f64),
    #[error("failed to score `{image_ref}`: {message}")]
    Image { image_ref: String, message: String },
}

/// 1-based ranks with ties sharing the mean of the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFew(n));
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 {
        return Err(EvalError::UndefinedRho("first"));
    }
    if vb == 0.0 {
        return Err(EvalError::UndefinedRho("second"));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooFew(a.len()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn mse(predictions: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffStats {
    pub pred_min: f64,
    pub pred_max: f64,
    /// Fraction of ground-truth values strictly below `pred_min`.
    pub frac_truth_below: f64,
}

pub fn cutoff_stats(predictions: &[f64], truths: &[f64]) -> Result<CutoffStats, EvalError> {
    if predictions.is_empty() || truths.is_empty() {
        return Err(EvalError::Empty);
    }
    let pred_min = predictions.iter().copied().fold(f64::INFINITY, f64::min);
    let pred_max = predictions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(CutoffStats {
        pred_min,
        pred_max,
        frac_truth_below: frac_below(truths, pred_min),
    })
}

/// Fraction of `values` strictly below `threshold`.
pub fn frac_below(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v < threshold).count() as f64 / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mse: f64,
    /// `sqrt(mse)`: the typical size of a prediction error.
    pub rmse: f64,
    /// `None` when ρ is undefined (constant predictions or truths).
    pub spearman: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman_error: Option<String>,
    pub pred_min: f64,
    pub pred_max: f64,
    pub frac_truth_below_pred_min: f64,
    pub image_refs: Vec<String>,
    pub predictions: Vec<f64>,
    pub truths: Vec<f64>,
}

impl EvalReport {
    pub fn from_predictions(
        image_refs: Vec<String>,
        predictions: Vec<f64>,
        truths: Vec<f64>,
    ) -> Result<Self, EvalError> {
        if image_refs.len() != predictions.len() {
            return Err(EvalError::LengthMismatch(image_refs.len(), predictions.len()));
        }
        let mse = mse(&predictions, &truths)?;
        let (spearman, spearman_error) = match spearman(&predictions, &truths) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let cut = cutoff_stats(&predictions, &truths)?;
        Ok(EvalReport {
            n: predictions.len(),
            mse,
            rmse: mse.sqrt(),
            spearman,
            spearman_error,
            pred_min: cut.pred_min,
            pred_max: cut.pred_max,
            frac_truth_below_pred_min: cut.frac_truth_below,
            image_refs,
            predictions,
            truths,
        })
    }

    /// Fraction of ground-truth scores strictly below `threshold`.
    pub fn frac_below(&self, threshold: f64) -> f64 {
        frac_below(&self.truths, threshold)
    }

    pub fn cutoff(&self) -> CutoffStats {
        CutoffStats {
            pred_min: self.pred_min,
            pred_max: self.pred_max,
            frac_truth_below: self.frac_truth_below_pred_min,
        }
    }
}

/// Images scored per batch during evaluation.
const EVAL_CHUNK: usize = 32;

/// Score every record of `manifest` once and summarize against its scores.
pub fn evaluate(
    scorer: &dyn Scorer,
    source: &dyn ImageSource,
    manifest: &DatasetManifest,
) -> Result<EvalReport, EvalError> {
    if manifest.records.is_empty() {
        return Err(EvalError::Empty);
    }
    let chunks: Vec<Vec<f64>> = manifest
        .records
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let images = chunk
                .iter()
                .map(|r| {
                    source.load(&r.image_ref).map_err(|e| EvalError::Image {
                        image_ref: r.image_ref.clone(),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            scorer.score_batch(&images).map_err(|e| EvalError::Image {
                image_ref: chunk[0].image_ref.clone(),
                message: e.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    let predictions = chunks.concat();
    EvalReport::from_predictions(
        manifest.records.iter().map(|r| r.image_ref.clone()).collect(),
        predictions,
        manifest.records.iter().map(|r| r.score).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule of thumb.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Bandwidth actually used, after flooring to the grid resolution.
    pub bandwidth: f64,
}

impl KdeCurve {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| (x[1] - x[0]) * (d[0] + d[1]) / 2.0)
            .sum()
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, falling back to whichever spread
/// measure is non-zero.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => 0.0,
    };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian KDE on a 512-point grid over `[0, 1]`. Mass leaving the interval
/// is folded back by reflecting the sample about both edges repeatedly, so
/// the density integrates to one. The bandwidth is floored at two grid
/// spacings so the trapezoid rule resolves every kernel.
pub fn kde(values: &[f64], bandwidth: Bandwidth) -> Result<KdeCurve, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    if values.len() < 2 {
        return Err(EvalError::TooFew(values.len()));
    }
    let dx = 1.0 / (KDE_GRID_POINTS - 1) as f64;
    let requested = match bandwidth {
        Bandwidth::Auto => silverman_bandwidth(values),
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(EvalError::Bandwidth(h)),
    };
    let h = requested.max(2.0 * dx);
    let folds = (5.0 * h).ceil() as i64 + 1;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| i as f64 * dx).collect();
    let mut centers = Vec::with_capacity(values.len() * (4 * folds as usize + 2));
    for &v in values {
        let v = v.clamp(0.0, 1.0);
        for k in -folds..=folds {
            let shift = 2.0 * k as f64;
            centers.push(shift + v);
            centers.push(shift - v);
        }
    }
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let cutoff = 10.0 * h;
    let density = grid
        .iter()
        .map(|&x| {
            let s: f64 = centers
                .iter()
                .filter(|&&c| (x - c).abs() <= cutoff)
                .map(|&c| {
                    let z = (x - c) / h;
                    (-0.5 * z * z).exp()
                })
                .sum();
            s * norm
        })
        .collect();
    Ok(KdeCurve {
        grid,
        density,
        bandwidth: h,
    })
}

/// CSV with columns `x,density_predictions,density_truths`. Both curves must
/// share a grid.
pub fn write_kde_csv<W: Write>(
    out: W,
    predictions: &KdeCurve,
    truths: &KdeCurve,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "density_predictions", "density_truths"])?;
    for ((x, p), t) in predictions
        .grid
        .iter()
        .zip(&predictions.density)
        .zip(&truths.density)
    {
        w.write_record([x.to_string(), p.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
