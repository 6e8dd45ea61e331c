//! Confusion matrices, per-class IoU and mean IoU with zero-filled classes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::LabelRaster;
use crate::taxonomy::{ClassId, Taxonomy, IGNORE_ID};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: pred {0}x{1}, gt {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
    #[error("class id {0} out of range for {1} classes")]
    OutOfRange(ClassId, usize),
    #[error("class {0} has no defined IoU")]
    UndefinedIoU(ClassId),
    #[error("class {0} is both averaged and zero-filled")]
    Overlap(ClassId),
    #[error("mean over zero classes")]
    EmptySpec,
    #[error("matrices of different sizes: {0} vs {1}")]
    SizeMismatch(usize, usize),
}

/// Pixel counts indexed `(gt, pred)`. Predictions of ignore on a labeled
/// pixel count as misses of the gt class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            missed: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: ClassId, pred: ClassId) -> u64 {
        self.counts[gt as usize * self.num_classes + pred as usize]
    }

    /// Evaluated (non-ignore gt) pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    pub fn accumulate(&mut self, pred: &LabelRaster, gt: &LabelRaster) -> Result<(), MetricsError> {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(MetricsError::ShapeMismatch(pred.width(), pred.height(), gt.width(), gt.height()));
        }
        let n = self.num_classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_ID {
                continue;
            }
            if g as usize >= n {
                return Err(MetricsError::OutOfRange(g, n));
            }
            if p == IGNORE_ID {
                self.missed[g as usize] += 1;
            } else if p as usize >= n {
                return Err(MetricsError::OutOfRange(p, n));
            } else {
                self.counts[g as usize * n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.num_classes != other.num_classes {
            return Err(MetricsError::SizeMismatch(self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.missed.iter_mut().zip(&other.missed) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither gt nor prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.counts[c * n + c];
                let gt_total: u64 = self.counts[c * n..(c + 1) * n].iter().sum::<u64>() + self.missed[c];
                let pred_total: u64 = (0..n).map(|g| self.counts[g * n + c]).sum();
                let denom = gt_total + pred_total - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Convenience wrapper over [`ConfusionMatrix::accumulate`].
pub fn accumulate_confusion(
    pred: &LabelRaster,
    gt: &LabelRaster,
    mut matrix: ConfusionMatrix,
) -> Result<ConfusionMatrix, MetricsError> {
    matrix.accumulate(pred, gt)?;
    Ok(matrix)
}

pub fn iou_per_class(matrix: &ConfusionMatrix) -> Vec<Option<f64>> {
    matrix.iou_per_class()
}

/// Which classes enter a mean IoU. Zero-filled classes contribute 0 each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MIoUSpec {
    pub class_subset: Vec<ClassId>,
    pub zero_fill: Vec<ClassId>,
}

impl MIoUSpec {
    pub fn over(class_subset: Vec<ClassId>) -> Self {
        MIoUSpec { class_subset, zero_fill: Vec::new() }
    }
}

pub fn mean_iou(ious: &[Option<f64>], spec: &MIoUSpec) -> Result<f64, MetricsError> {
    if let Some(&c) = spec.class_subset.iter().find(|c| spec.zero_fill.contains(c)) {
        return Err(MetricsError::Overlap(c));
    }
    let denom = spec.class_subset.len() + spec.zero_fill.len();
    if denom == 0 {
        return Err(MetricsError::EmptySpec);
    }
    let mut sum = 0.0;
    for &c in &spec.class_subset {
        sum += ious
            .get(c as usize)
            .copied()
            .flatten()
            .ok_or(MetricsError::UndefinedIoU(c))?;
    }
    Ok(sum / denom as f64)
}

/// Per-class IoU, named means and the raw matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassIoU>,
    pub means: Vec<NamedMean>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIoU {
    pub id: ClassId,
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMean {
    pub name: String,
    pub spec: MIoUSpec,
    pub value: Option<f64>,
}

impl MetricReport {
    /// Means whose subset has an undefined class are reported as `None`.
    pub fn build(matrix: ConfusionMatrix, taxonomy: &Taxonomy, specs: &[(String, MIoUSpec)]) -> Self {
        let ious = matrix.iou_per_class();
        let per_class = taxonomy
            .classes()
            .iter()
            .map(|c| ClassIoU {
                id: c.id,
                name: c.name.clone(),
                iou: ious.get(c.id as usize).copied().flatten(),
            })
            .collect();
        let means = specs
            .iter()
            .map(|(name, spec)| NamedMean {
                name: name.clone(),
                spec: spec.clone(),
                value: mean_iou(&ious, spec).ok(),
            })
            .collect();
        MetricReport { per_class, means, confusion: matrix }
    }

    pub fn to_table(&self) -> String {
        let width = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}", "class", "IoU");
        for c in &self.per_class {
            let v = c.iou.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(out, "{:<width$}  {:>7}", c.name, v);
        }
        for m in &self.means {
            let v = m.value.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(out, "{:<width$}  {:>7}", m.name, v);
        }
        out
    }
}
