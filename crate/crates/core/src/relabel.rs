//! The per-image relabel step: schedule gate, patch extraction, filtering,
//! relabeling and pasting back into the pseudo-label.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{extract_patches, filter_by_score, nms_indices, score_order, Detection, DetectorThresholds, Patch};
use crate::raster::{paste_into, ConfidenceRaster, LabelRaster, RasterError, Shaped};
use crate::taxonomy::{ClassId, RelabelMap, Taxonomy};
use crate::zsfilter::{classify_patch, precheck_contains_from, ClassifierThresholds, ConceptScores, ZsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelabelError {
    #[error("class {0} is not a Map.To class of the relabeling map")]
    NotAMapTarget(ClassId),
    #[error("no classification record for patch {0:?}")]
    MissingScores(String),
    #[error("detection for image {found:?} passed with detections for {expected:?}")]
    MixedImages { expected: String, found: String },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Classifier(#[from] ZsError),
}

/// When information collection and relabeling happen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelSchedule {
    pub relabel_start_step: u64,
    pub collect_start_step: u64,
    pub total_steps: u64,
}

impl Default for RelabelSchedule {
    fn default() -> Self {
        RelabelSchedule {
            relabel_start_step: 12_000,
            collect_start_step: 8_000,
            total_steps: 40_000,
        }
    }
}

impl RelabelSchedule {
    pub fn new(relabel_start_step: u64, collect_start_step: u64, total_steps: u64) -> Result<Self, RelabelError> {
        let s = RelabelSchedule { relabel_start_step, collect_start_step, total_steps };
        s.validate()?;
        Ok(s)
    }

    /// Same proportions as the default schedule, scaled to `total_steps`.
    pub fn scaled(total_steps: u64) -> Self {
        RelabelSchedule {
            relabel_start_step: total_steps * 3 / 10,
            collect_start_step: total_steps / 5,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<(), RelabelError> {
        if self.collect_start_step <= self.relabel_start_step && self.relabel_start_step <= self.total_steps {
            Ok(())
        } else {
            Err(RelabelError::Schedule(format!(
                "need collect_start ({}) <= relabel_start ({}) <= total ({})",
                self.collect_start_step, self.relabel_start_step, self.total_steps
            )))
        }
    }

    pub fn is_relabel_step(&self, step: u64) -> bool {
        step >= self.relabel_start_step
    }

    pub fn is_collect_step(&self, step: u64) -> bool {
        step >= self.collect_start_step && step < self.relabel_start_step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiParams {
    pub detector: DetectorThresholds,
    pub classifier: ClassifierThresholds,
    /// Confidence written to relabeled pixels.
    pub relabel_confidence: f32,
    /// When false every prechecked patch is accepted without consulting
    /// the classifier.
    pub classifier_filter: bool,
}

impl Default for CsiParams {
    fn default() -> Self {
        CsiParams {
            detector: DetectorThresholds::default(),
            classifier: ClassifierThresholds::default(),
            relabel_confidence: 1.0,
            classifier_filter: true,
        }
    }
}

impl CsiParams {
    pub fn cityscapes_defaults(target: &Taxonomy) -> Self {
        CsiParams {
            detector: DetectorThresholds::cityscapes_defaults(target),
            classifier: ClassifierThresholds::cityscapes_defaults(target),
            ..CsiParams::default()
        }
    }
}

/// Per-image counters. `applied = extracted - prechecked_out - filtered_out`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelReport {
    pub patches_extracted: u64,
    pub patches_prechecked_out: u64,
    pub patches_filtered_out: u64,
    pub patches_applied: u64,
    /// Pixels whose label changed, keyed by their new class.
    pub pixels_relabeled_per_class: BTreeMap<ClassId, u64>,
}

impl RelabelReport {
    pub fn merge(&mut self, other: &RelabelReport) {
        self.patches_extracted += other.patches_extracted;
        self.patches_prechecked_out += other.patches_prechecked_out;
        self.patches_filtered_out += other.patches_filtered_out;
        self.patches_applied += other.patches_applied;
        for (&k, &v) in &other.pixels_relabeled_per_class {
            *self.pixels_relabeled_per_class.entry(k).or_insert(0) += v;
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == RelabelReport::default()
    }

    pub fn to_text(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "patches_extracted      {}", self.patches_extracted);
        let _ = writeln!(out, "patches_prechecked_out {}", self.patches_prechecked_out);
        let _ = writeln!(out, "patches_filtered_out   {}", self.patches_filtered_out);
        let _ = writeln!(out, "patches_applied        {}", self.patches_applied);
        for (&id, n) in &self.pixels_relabeled_per_class {
            let name = taxonomy.name_of(id).map_or_else(|| id.to_string(), str::to_string);
            let _ = writeln!(out, "pixels_relabeled[{name}] {n}");
        }
        out
    }
}

/// Supplies zero-shot classifier output for a patch.
pub trait ConceptScoreSource {
    fn scores_for(&self, patch: &Patch) -> Option<ConceptScores>;
}

impl ConceptScoreSource for HashMap<String, ConceptScores> {
    fn scores_for(&self, patch: &Patch) -> Option<ConceptScores> {
        self.get(&patch.patch_id).cloned()
    }
}

impl<F> ConceptScoreSource for F
where
    F: Fn(&Patch) -> Option<ConceptScores>,
{
    fn scores_for(&self, patch: &Patch) -> Option<ConceptScores> {
        self(patch)
    }
}

/// Everything `apply_csi` needs besides the per-image data.
#[derive(Debug, Clone)]
pub struct CsiContext<'a> {
    pub map: &'a RelabelMap,
    /// Target taxonomy; resolves classifier concepts.
    pub taxonomy: &'a Taxonomy,
    pub params: &'a CsiParams,
    pub schedule: &'a RelabelSchedule,
}

/// Replaces the from-classes of the entries targeting the patch's query
/// class with that class.
pub fn relabel_patch(patch: &Patch, map: &RelabelMap) -> Result<Patch, RelabelError> {
    let to = patch.query_class();
    let sources = map.sources_of(to);
    if sources.is_empty() {
        return Err(RelabelError::NotAMapTarget(to));
    }
    let mut out = patch.clone();
    for v in out.cropped_label.data_mut() {
        if sources.contains(v) {
            *v = to;
        }
    }
    Ok(out)
}

/// Threshold, NMS and extract. Ordinals in patch IDs index the post-NMS
/// list, so they do not depend on the relabeling map.
pub fn candidate_patches(
    pseudo_label: &LabelRaster,
    dets: &[Detection],
    thresholds: &DetectorThresholds,
) -> Result<Vec<Patch>, RelabelError> {
    let Some(first) = dets.first() else {
        return Ok(Vec::new());
    };
    if let Some(other) = dets.iter().find(|d| d.image_id != first.image_id) {
        return Err(RelabelError::MixedImages {
            expected: first.image_id.clone(),
            found: other.image_id.clone(),
        });
    }
    let scored = filter_by_score(dets, thresholds);
    let kept: Vec<Detection> = nms_indices(&scored, thresholds.nms_iou)
        .into_iter()
        .map(|i| scored[i].clone())
        .collect();
    Ok(extract_patches(pseudo_label, &kept, &first.image_id))
}

/// Outcome of the filter stage for one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchFate {
    /// Query class has no map entry (e.g. an open class not yet configured).
    Unmapped,
    PrecheckedOut,
    FilteredOut,
    Accepted,
}

pub fn judge_patch(
    patch: &Patch,
    scores: &dyn ConceptScoreSource,
    ctx: &CsiContext<'_>,
) -> Result<PatchFate, RelabelError> {
    if ctx.map.sources_of(patch.query_class()).is_empty() {
        return Ok(PatchFate::Unmapped);
    }
    if !precheck_contains_from(patch, ctx.map) {
        return Ok(PatchFate::PrecheckedOut);
    }
    if !ctx.params.classifier_filter {
        return Ok(PatchFate::Accepted);
    }
    let s = scores
        .scores_for(patch)
        .ok_or_else(|| RelabelError::MissingScores(patch.patch_id.clone()))?;
    let verdict = classify_patch(&s, patch.query_class(), ctx.taxonomy, &ctx.params.classifier)?;
    Ok(if verdict.accepted {
        PatchFate::Accepted
    } else {
        PatchFate::FilteredOut
    })
}

/// Relabels one image's pseudo-label.
///
/// Before `relabel_start_step` the inputs are returned unchanged. Otherwise
/// detections go through score thresholding, per-class NMS, patch
/// extraction, the Map.From precheck and the classifier filter. Accepted
/// patches are relabeled and pasted back in descending score order, so on
/// overlaps the lower-scored patch's crop lands last. Every pixel whose
/// label ends up different from the input gets `relabel_confidence`.
pub fn apply_csi(
    step: u64,
    pseudo_label: &LabelRaster,
    confidence: &ConfidenceRaster,
    dets: &[Detection],
    scores: &dyn ConceptScoreSource,
    ctx: &CsiContext<'_>,
) -> Result<(LabelRaster, ConfidenceRaster, RelabelReport), RelabelError> {
    if !pseudo_label.same_shape(confidence) {
        let (w, h) = confidence.shape();
        return Err(RasterError::ShapeMismatch(pseudo_label.width(), pseudo_label.height(), w, h).into());
    }
    let mut report = RelabelReport::default();
    if !ctx.schedule.is_relabel_step(step) || ctx.map.is_empty() || dets.is_empty() {
        return Ok((pseudo_label.clone(), confidence.clone(), report));
    }

    let patches = candidate_patches(pseudo_label, dets, &ctx.params.detector)?;
    let mut accepted: Vec<Patch> = Vec::new();
    for patch in patches {
        match judge_patch(&patch, scores, ctx)? {
            PatchFate::Unmapped => continue,
            PatchFate::PrecheckedOut => report.patches_prechecked_out += 1,
            PatchFate::FilteredOut => report.patches_filtered_out += 1,
            PatchFate::Accepted => accepted.push(relabel_patch(&patch, ctx.map)?),
        }
        report.patches_extracted += 1;
    }
    report.patches_applied = accepted.len() as u64;

    let order = score_order(&accepted.iter().map(|p| p.detection.clone()).collect::<Vec<_>>());
    let mut out = pseudo_label.clone();
    for i in order {
        let p = &accepted[i];
        paste_into(&mut out, &p.cropped_label, (p.bbox().x_min, p.bbox().y_min))?;
    }

    let mut conf = confidence.clone();
    for (i, (&before, &after)) in pseudo_label.data().iter().zip(out.data()).enumerate() {
        if before != after {
            conf.set_index(i, ctx.params.relabel_confidence);
            *report.pixels_relabeled_per_class.entry(after).or_insert(0) += 1;
        }
    }
    Ok((out, conf, report))
}
