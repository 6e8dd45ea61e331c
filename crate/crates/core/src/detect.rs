//! Detection records, score thresholds, NMS and patch extraction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{crop, BBox, LabelRaster};
use crate::taxonomy::{ClassId, Taxonomy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

fn record_error(line: usize, message: impl Into<String>) -> DetectError {
    DetectError::Record { line, message: message.into() }
}

/// One scored box from the zero-shot detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    /// Target-taxonomy class that was queried.
    pub query_class: ClassId,
    /// Concept prompt that produced the box.
    pub concept: String,
    pub bbox: BBox,
    pub score: f64,
}

/// Where a patch's image pixels live; the engine never touches image data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCropRef {
    pub image_id: String,
    pub bbox: BBox,
}

/// A detection paired with the pseudo-label under its (clipped) box.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub patch_id: String,
    pub detection: Detection,
    pub cropped_label: LabelRaster,
    pub image_crop_ref: ImageCropRef,
}

impl Patch {
    pub fn bbox(&self) -> BBox {
        self.detection.bbox
    }

    pub fn query_class(&self) -> ClassId {
        self.detection.query_class
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorThresholds {
    pub per_class: BTreeMap<ClassId, f64>,
    /// Used for classes without an entry.
    pub default: f64,
    pub nms_iou: f64,
}

impl Default for DetectorThresholds {
    fn default() -> Self {
        DetectorThresholds {
            per_class: BTreeMap::new(),
            default: 0.1,
            nms_iou: 0.3,
        }
    }
}

impl DetectorThresholds {
    /// terrain 0.01, truck 0.1, train 0.1, NMS IoU 0.3. Classes missing from
    /// `target` are skipped.
    pub fn cityscapes_defaults(target: &Taxonomy) -> Self {
        let mut t = DetectorThresholds::default();
        for (name, v) in [("terrain", 0.01), ("truck", 0.1), ("train", 0.1)] {
            if let Ok(id) = target.id_of(name) {
                t.per_class.insert(id, v);
            }
        }
        t
    }

    pub fn threshold(&self, class: ClassId) -> f64 {
        self.per_class.get(&class).copied().unwrap_or(self.default)
    }

    pub fn validate(&self) -> Result<(), String> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.default) || !in_unit(self.nms_iou) {
            return Err("detector thresholds must lie in [0, 1]".into());
        }
        match self.per_class.iter().find(|(_, &v)| !in_unit(v)) {
            Some((id, v)) => Err(format!("detector threshold {v} for class {id} outside [0, 1]")),
            None => Ok(()),
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Keeps detections scoring at least their class threshold, order preserved.
pub fn filter_by_score(dets: &[Detection], thresholds: &DetectorThresholds) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.score >= thresholds.threshold(d.query_class))
        .cloned()
        .collect()
}

/// Indices of detections ranked by descending score; ties keep input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Indices kept by greedy per-class NMS, in input order.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            dets[k].query_class == d.query_class && box_iou(&dets[k].bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

/// Greedy NMS within each query class. A box survives iff its IoU with every
/// higher-ranked surviving box of the same class is at most `iou_threshold`.
/// Survivors are returned in input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Crops the pseudo-label under each detection. Boxes are clipped to the
/// raster and dropped when nothing is left. Patch IDs are
/// `image_id#ordinal` with the ordinal being the detection's index in `dets`.
pub fn extract_patches(pseudo_label: &LabelRaster, dets: &[Detection], image_id: &str) -> Vec<Patch> {
    let (w, h) = (pseudo_label.width(), pseudo_label.height());
    dets.iter()
        .enumerate()
        .filter_map(|(ordinal, det)| {
            let bbox = det.bbox.clip(w, h)?;
            let cropped_label = crop(pseudo_label, &bbox).expect("clipped box is in bounds");
            let mut detection = det.clone();
            detection.bbox = bbox;
            Some(Patch {
                patch_id: format!("{image_id}#{ordinal}"),
                detection,
                cropped_label,
                image_crop_ref: ImageCropRef {
                    image_id: image_id.to_string(),
                    bbox,
                },
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    image_id: String,
    query_class: String,
    concept: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

/// Converts detector coordinates (possibly fractional or slightly negative)
/// to a pixel box: minima are floored, maxima ceiled, negatives clamped.
pub fn pixel_box(coords: [f64; 4]) -> Option<BBox> {
    if coords.iter().any(|c| !c.is_finite()) {
        return None;
    }
    let lo = |v: f64| v.floor().max(0.0) as u32;
    let hi = |v: f64| v.ceil().max(0.0) as u32;
    BBox::new(lo(coords[0]), lo(coords[1]), hi(coords[2]), hi(coords[3])).ok()
}

/// Parses detections JSON Lines. `query_class` names resolve in `taxonomy`.
/// Blank lines are skipped.
pub fn parse_detections(text: &str, taxonomy: &Taxonomy) -> Result<Vec<Detection>, DetectError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(line).map_err(|e| record_error(n, e.to_string()))?;
        let query_class = taxonomy
            .id_of(&rec.query_class)
            .map_err(|e| record_error(n, e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(record_error(n, format!("score {} outside [0, 1]", rec.score)));
        }
        let bbox = pixel_box(rec.bbox).ok_or_else(|| record_error(n, format!("invalid box {:?}", rec.bbox)))?;
        out.push(Detection {
            image_id: rec.image_id,
            query_class,
            concept: rec.concept,
            bbox,
            score: rec.score,
        });
    }
    Ok(out)
}

/// Emits detections as JSON Lines, one LF-terminated record per detection.
pub fn write_detections(dets: &[Detection], taxonomy: &Taxonomy) -> String {
    let mut out = String::new();
    for d in dets {
        let rec = DetectionRecord {
            image_id: d.image_id.clone(),
            query_class: taxonomy
                .name_of(d.query_class)
                .map_or_else(|| d.query_class.to_string(), str::to_string),
            concept: d.concept.clone(),
            bbox: d.bbox.as_array().map(f64::from),
            score: d.score,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// One line of the patch manifest handed to an external classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifestRecord {
    pub patch_id: String,
    pub image_id: String,
    pub query_class: String,
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
    pub score: f64,
}

pub fn write_patch_manifest(patches: &[Patch], taxonomy: &Taxonomy) -> String {
    let mut out = String::new();
    for p in patches {
        let rec = PatchManifestRecord {
            patch_id: p.patch_id.clone(),
            image_id: p.image_crop_ref.image_id.clone(),
            query_class: taxonomy
                .name_of(p.query_class())
                .map_or_else(|| p.query_class().to_string(), str::to_string),
            bbox: p.bbox().as_array(),
            score: p.detection.score,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}
