//! Segmentation metrics and the CSV row format used by training and eval.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DtnError, Result};
use crate::tensor::{LabelMap, Tensor};

fn check_extents(op: &'static str, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(DtnError::dim(
            op,
            format!(
                "prediction is {}x{}, truth is {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            ),
        ));
    }
    Ok(())
}

pub fn pixel_accuracy(pred: &LabelMap, truth: &LabelMap) -> Result<f64> {
    check_extents("pixel_accuracy", pred, truth)?;
    let hits = pred
        .ids()
        .iter()
        .zip(truth.ids())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / truth.ids().len() as f64)
}

/// Per-class intersection over union for classes `0..n_classes`; `None` for
/// classes absent from both maps.
pub fn class_iou(pred: &LabelMap, truth: &LabelMap, n_classes: usize) -> Result<Vec<Option<f64>>> {
    check_extents("class_iou", pred, truth)?;
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&p, &t) in pred.ids().iter().zip(truth.ids()) {
        if p >= n_classes || t >= n_classes {
            return Err(DtnError::Data(format!(
                "class id {} out of range for {n_classes} classes",
                p.max(t)
            )));
        }
        union[p] += 1;
        if p == t {
            inter[p] += 1;
        } else {
            union[t] += 1;
        }
    }
    Ok(inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect())
}

/// Mean IoU over the classes present in the prediction or the truth.
pub fn mean_iou(pred: &LabelMap, truth: &LabelMap, n_classes: usize) -> Result<f64> {
    let per = class_iou(pred, truth, n_classes)?;
    let present: Vec<f64> = per.into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// Starts at `(0, 0)` and ends at `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve of `scores` (probability of class 1) against binary `truth`.
/// Equal scores form one threshold step.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(DtnError::dim(
            "roc_auc",
            format!("{} scores for {} labels", scores.len(), truth.len()),
        ));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(DtnError::Data(format!("non-finite score {bad}")));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DtnError::UndefinedMetric(format!(
            "ROC needs both classes in the truth ({pos} positive, {neg} negative)"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points.last().expect("non-empty");
        let p = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// Class-1 probabilities against a binary label map.
pub fn roc_auc_map(probs: &Tensor, truth: &LabelMap) -> Result<RocCurve> {
    let (h, w, c) = probs.dims3("roc_auc_map")?;
    if (h, w) != (truth.height(), truth.width()) || c < 2 {
        return Err(DtnError::dim(
            "roc_auc_map",
            format!(
                "probabilities {h}x{w}x{c} against labels {}x{}",
                truth.height(),
                truth.width()
            ),
        ));
    }
    let scores: Vec<f64> = probs.data().chunks_exact(c).map(|px| px[1]).collect();
    let labels: Vec<bool> = truth.ids().iter().map(|&t| t == 1).collect();
    roc_auc(&scores, &labels)
}

/// One line of a metrics CSV. `auc` is empty when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub auc: Option<f64>,
}

pub const CSV_HEADER: [&str; 6] = ["run_id", "step", "loss", "accuracy", "mean_iou", "auc"];

pub struct MetricsWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Creates the file and writes the header immediately, so a run with no
    /// rows still produces a valid CSV.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| DtnError::io(&path, e))?;
        inner
            .write_record(CSV_HEADER)
            .map_err(|e| DtnError::io(&path, e))?;
        inner.flush().map_err(|e| DtnError::io(&path, e))?;
        Ok(Self { inner, path })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner
            .serialize(row)
            .map_err(|e| DtnError::io(&self.path, e))?;
        self.inner.flush().map_err(|e| DtnError::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| DtnError::io(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| DtnError::Data(format!("{}: {e}", path.display()))))
        .collect()
}
