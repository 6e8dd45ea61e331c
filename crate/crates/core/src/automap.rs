//! Auto-configuration of From→To entries for classes absent from the
//! source taxonomy.
//!
//! During the collection window every verified patch of an open class votes
//! for the source class that dominates its pseudo-label. When the window
//! closes, the most-voted candidate sharing the open class's category
//! becomes that class's Map.From.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{Detection, Patch};
use crate::raster::LabelRaster;
use crate::relabel::{candidate_patches, ConceptScoreSource, CsiParams, RelabelError};
use crate::taxonomy::{validate_map, ClassId, MapEntry, MapOrigin, MapViolation, RelabelMap, Taxonomy, TaxonomyError};
use crate::zsfilter::classify_patch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutoMapError {
    #[error("collection windows differ: {0:?} vs {1:?}")]
    WindowMismatch((u64, u64), (u64, u64)),
    #[error("merged map is invalid: {0:?}")]
    InvalidMap(Vec<MapViolation>),
    #[error("counts checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Relabel(#[from] RelabelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoMapConfig {
    /// Minimum share of a patch's source-class pixels a candidate must hold.
    pub area_fraction_threshold: f64,
}

impl Default for AutoMapConfig {
    fn default() -> Self {
        AutoMapConfig { area_fraction_threshold: 0.2 }
    }
}

/// Votes per open class: candidate source class → number of patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCounts {
    pub window: (u64, u64),
    pub counts: BTreeMap<ClassId, BTreeMap<ClassId, u64>>,
}

impl CandidateCounts {
    pub fn empty(window: (u64, u64)) -> Self {
        CandidateCounts { window, counts: BTreeMap::new() }
    }

    pub fn add(&mut self, to_class: ClassId, from_class: ClassId, n: u64) {
        *self.counts.entry(to_class).or_default().entry(from_class).or_insert(0) += n;
    }

    pub fn get(&self, to_class: ClassId, from_class: ClassId) -> u64 {
        self.counts
            .get(&to_class)
            .and_then(|m| m.get(&from_class))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().flat_map(|m| m.values()).sum()
    }

    /// `{"window":[start,end],"counts":{"train":{"bus":40}}}` with class names.
    pub fn to_json(&self, source: &Taxonomy, target: &Taxonomy) -> String {
        let name = |t: &Taxonomy, id: ClassId| t.name_of(id).map_or_else(|| id.to_string(), str::to_string);
        let counts: BTreeMap<String, BTreeMap<String, u64>> = self
            .counts
            .iter()
            .map(|(&to, m)| {
                (
                    name(target, to),
                    m.iter().map(|(&from, &n)| (name(source, from), n)).collect(),
                )
            })
            .collect();
        let doc = CountsDoc { window: [self.window.0, self.window.1], counts };
        serde_json::to_string_pretty(&doc).expect("counts serialize")
    }

    pub fn from_json(text: &str, source: &Taxonomy, target: &Taxonomy) -> Result<Self, AutoMapError> {
        let doc: CountsDoc = serde_json::from_str(text).map_err(|e| AutoMapError::Checkpoint(e.to_string()))?;
        let mut out = CandidateCounts::empty((doc.window[0], doc.window[1]));
        for (to, m) in doc.counts {
            let to = target.id_of(&to)?;
            for (from, n) in m {
                out.add(to, source.id_of(&from)?, n);
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CountsDoc {
    window: [u64; 2],
    counts: BTreeMap<String, BTreeMap<String, u64>>,
}

/// The source class dominating a verified open-class patch, if any clears
/// the area threshold. Only source-taxonomy pixels count, both as
/// candidates and in the denominator; ties go to the lowest class ID.
pub fn collect_candidates(
    patch: &Patch,
    source: &Taxonomy,
    config: &AutoMapConfig,
) -> Option<(ClassId, ClassId)> {
    let hist: BTreeMap<ClassId, u64> = patch
        .cropped_label
        .histogram()
        .into_iter()
        .filter(|(id, _)| source.contains(*id))
        .collect();
    let total: u64 = hist.values().sum();
    if total == 0 {
        return None;
    }
    let min_count = config.area_fraction_threshold * total as f64;
    hist.iter()
        .filter(|(_, &n)| n as f64 >= min_count)
        // BTreeMap iterates ascending IDs; strict comparison keeps the lowest on ties
        .fold(None, |best: Option<(ClassId, u64)>, (&id, &n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((id, n)),
        })
        .map(|(from, _)| (patch.query_class(), from))
}

/// Target classes with neither a source counterpart nor a map entry.
pub fn open_classes(source: &Taxonomy, target: &Taxonomy, map: &RelabelMap) -> Vec<ClassId> {
    let mapped = map.to_ids();
    target.ids().filter(|c| !source.contains(*c) && !mapped.contains(c)).collect()
}

/// Votes from one image. Detections go through thresholding, NMS and
/// extraction; the classifier verifies each open-class patch (unless the
/// filter is off) and every accepted patch adds one vote. Returns the
/// number of votes cast.
#[allow(clippy::too_many_arguments)]
pub fn collect_image_votes(
    counts: &mut CandidateCounts,
    pseudo_label: &LabelRaster,
    dets: &[Detection],
    open: &[ClassId],
    scores: &dyn ConceptScoreSource,
    params: &CsiParams,
    config: &AutoMapConfig,
    source: &Taxonomy,
    target: &Taxonomy,
) -> Result<u64, AutoMapError> {
    let mut votes = 0;
    // Extract from every detection so patch IDs match the relabel step's.
    let patches = candidate_patches(pseudo_label, dets, &params.detector)?;
    for patch in patches.into_iter().filter(|p| open.contains(&p.query_class())) {
        if params.classifier_filter {
            let s = scores
                .scores_for(&patch)
                .ok_or_else(|| RelabelError::MissingScores(patch.patch_id.clone()))?;
            let verdict = classify_patch(&s, patch.query_class(), target, &params.classifier)
                .map_err(RelabelError::from)?;
            if !verdict.accepted {
                continue;
            }
        }
        if let Some((to, from)) = collect_candidates(&patch, source, config) {
            counts.add(to, from, 1);
            votes += 1;
        }
    }
    Ok(votes)
}

pub fn merge_counts(a: &CandidateCounts, b: &CandidateCounts) -> Result<CandidateCounts, AutoMapError> {
    if a.window != b.window {
        return Err(AutoMapError::WindowMismatch(a.window, b.window));
    }
    let mut out = a.clone();
    for (&to, m) in &b.counts {
        for (&from, &n) in m {
            out.add(to, from, n);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalizedMap {
    pub map: RelabelMap,
    pub warnings: Vec<String>,
}

/// Picks, for every open class with votes, the most-voted candidate of the
/// same category (lowest ID on ties) and appends it to `predefined`.
/// Classes without a same-category candidate are skipped with a warning.
pub fn finalize_map(
    counts: &CandidateCounts,
    source: &Taxonomy,
    target: &Taxonomy,
    predefined: &RelabelMap,
) -> Result<FinalizedMap, AutoMapError> {
    let mut map = predefined.clone();
    let mut warnings = Vec::new();
    for (&to, candidates) in &counts.counts {
        let to_def = target.class(to)?;
        if !predefined.sources_of(to).is_empty() {
            warnings.push(format!("{} already has a predefined entry; votes ignored", to_def.name));
            continue;
        }
        let best = candidates
            .iter()
            .filter(|(&from, &n)| {
                n > 0 && source.get(from).is_some_and(|c| c.category == to_def.category)
            })
            .fold(None, |best: Option<(ClassId, u64)>, (&id, &n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((id, n)),
            });
        match best {
            Some((from, _)) => map.push(MapEntry { from, to, origin: MapOrigin::AutoConfigured }),
            None => warnings.push(format!(
                "no {} candidate for {}; class left unmapped",
                to_def.category, to_def.name
            )),
        }
    }
    validate_map(&map, source, target).map_err(AutoMapError::InvalidMap)?;
    Ok(FinalizedMap { map, warnings })
}
