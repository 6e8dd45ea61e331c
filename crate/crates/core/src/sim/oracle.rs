use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SimError, SimWorld};
use crate::detect::{Detection, Patch};
use crate::raster::{connected_components, BBox, LabelRaster};
use crate::relabel::ConceptScoreSource;
use crate::rng;
use crate::taxonomy::{ClassId, Taxonomy, IGNORE_ID};
use crate::zsfilter::ConceptScores;

/// Degradation knobs for the detector and classifier oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub box_jitter_px: u32,
    /// Chance that a component of a confusable class yields a spurious box.
    pub false_positive_rate: f64,
    pub classifier_correct_prob: f64,
    /// Uniform score range for true boxes.
    pub true_score: [f64; 2],
    /// Uniform score range for spurious boxes.
    pub false_score: [f64; 2],
    /// Logit given to the winning concept; every other concept gets 0.
    pub winner_logit: f64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig {
            box_jitter_px: 0,
            false_positive_rate: 0.0,
            classifier_correct_prob: 1.0,
            true_score: [1.0, 1.0],
            false_score: [0.3, 0.7],
            winner_logit: 6.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.false_positive_rate) || !unit(self.classifier_correct_prob) {
            return Err(SimError::Noise("rates must lie in [0, 1]".into()));
        }
        for r in [self.true_score, self.false_score] {
            if !(unit(r[0]) && unit(r[1]) && r[0] <= r[1]) {
                return Err(SimError::Noise(format!("score range {r:?}")));
            }
        }
        if !self.winner_logit.is_finite() {
            return Err(SimError::Noise("winner_logit must be finite".into()));
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::noiseless()
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

fn jitter(rng: &mut ChaCha8Rng, b: BBox, px: u32, width: u32, height: u32) -> BBox {
    if px == 0 {
        return b;
    }
    let j = px as i64;
    let mut shift = |v: u32, limit: u32| -> u32 { (v as i64 + rng.random_range(-j..=j)).clamp(0, limit as i64) as u32 };
    let x_min = shift(b.x_min, width);
    let y_min = shift(b.y_min, height);
    let x_max = shift(b.x_max, width);
    let y_max = shift(b.y_max, height);
    BBox {
        x_min: if x_min < x_max { x_min } else { b.x_min },
        y_min: if y_min < y_max { y_min } else { b.y_min },
        x_max: if x_min < x_max { x_max } else { b.x_max },
        y_max: if y_min < y_max { y_max } else { b.y_max },
    }
}

/// Boxes for `query_class`: one per ground-truth component, then spurious
/// boxes over components of classes confusable with it.
pub fn simulate_detector(
    world: &SimWorld,
    query_class: ClassId,
    taxonomy: &Taxonomy,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Vec<Detection>, SimError> {
    noise.validate()?;
    let concept = taxonomy.class(query_class)?.concepts[0].clone();
    let mut rng = rng::stream(seed, "detector", query_class as u64);
    let (w, h) = (world.width(), world.height());
    let mut out = Vec::new();
    let mut emit = |bbox: BBox, score: f64| {
        out.push(Detection {
            image_id: world.image_id.clone(),
            query_class,
            concept: concept.clone(),
            bbox,
            score,
        })
    };
    for b in connected_components(&world.gt_labels, query_class) {
        let bbox = jitter(&mut rng, b, noise.box_jitter_px, w, h);
        emit(bbox, uniform(&mut rng, noise.true_score));
    }
    for other in world.confusable_with(query_class) {
        for b in connected_components(&world.gt_labels, other) {
            if rng.random::<f64>() < noise.false_positive_rate {
                let bbox = jitter(&mut rng, b, noise.box_jitter_px, w, h);
                emit(bbox, uniform(&mut rng, noise.false_score));
            }
        }
    }
    Ok(out)
}

/// The pseudo-label a source-trained teacher would give: every class
/// missing from `source` becomes the first confusable class it knows.
pub fn folded_pseudo_label(world: &SimWorld, source: &Taxonomy) -> LabelRaster {
    let mut lut = [0u8; 256];
    for (i, v) in lut.iter_mut().enumerate() {
        let c = i as ClassId;
        *v = if source.contains(c) {
            c
        } else {
            world.confusable_with(c).into_iter().find(|p| source.contains(*p)).unwrap_or(c)
        };
    }
    world.gt_labels.map_ids(&lut)
}

/// Most frequent non-ignore class inside `bbox`; lowest ID on ties.
pub fn dominant_class(labels: &LabelRaster, bbox: &BBox) -> Option<ClassId> {
    let mut counts: BTreeMap<ClassId, u64> = BTreeMap::new();
    for y in bbox.y_min..bbox.y_max.min(labels.height()) {
        for x in bbox.x_min..bbox.x_max.min(labels.width()) {
            let v = labels.get(x, y);
            if v != IGNORE_ID {
                *counts.entry(v).or_insert(0) += 1;
            }
        }
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(ClassId, u64)>, (c, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((c, n)),
        })
        .map(|(c, _)| c)
}

/// Logits over every concept of `taxonomy`. The winning class is the
/// patch's dominant ground-truth class with probability
/// `classifier_correct_prob`, otherwise a class confusable with it (or the
/// next class in taxonomy order when it has none).
pub fn simulate_classifier(
    patch: &Patch,
    world: &SimWorld,
    taxonomy: &Taxonomy,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<ConceptScores, SimError> {
    noise.validate()?;
    let bbox = patch.bbox();
    if !bbox.fits(world.width(), world.height()) {
        return Err(SimError::Shape(format!("patch {} outside world", patch.patch_id)));
    }
    let dominant = dominant_class(&world.gt_labels, &bbox).unwrap_or(patch.query_class());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let winner = if rng.random::<f64>() < noise.classifier_correct_prob {
        dominant
    } else {
        world
            .confusable_with(dominant)
            .into_iter()
            .find(|c| taxonomy.contains(*c))
            .unwrap_or_else(|| {
                let ids: Vec<ClassId> = taxonomy.ids().collect();
                let i = ids.iter().position(|&c| c == dominant).map_or(0, |i| (i + 1) % ids.len());
                ids[i]
            })
    };
    let winner_concept = taxonomy.class(winner)?.concepts[0].as_str();
    let logits = taxonomy
        .all_concepts()
        .into_iter()
        .map(|(_, c)| (c.to_string(), if c == winner_concept { noise.winner_logit } else { 0.0 }))
        .collect();
    Ok(ConceptScores { patch_id: patch.patch_id.clone(), logits })
}

/// Classifier oracle keyed by image ID. Each patch draws from its own
/// stream, so results do not depend on query order.
pub struct SimScorer<'a> {
    worlds: HashMap<&'a str, &'a SimWorld>,
    taxonomy: &'a Taxonomy,
    noise: &'a NoiseConfig,
    seed: u64,
}

impl<'a> SimScorer<'a> {
    pub fn new(worlds: impl IntoIterator<Item = &'a SimWorld>, taxonomy: &'a Taxonomy, noise: &'a NoiseConfig, seed: u64) -> Self {
        SimScorer {
            worlds: worlds.into_iter().map(|w| (w.image_id.as_str(), w)).collect(),
            taxonomy,
            noise,
            seed,
        }
    }
}

impl ConceptScoreSource for SimScorer<'_> {
    fn scores_for(&self, patch: &Patch) -> Option<ConceptScores> {
        let world = self.worlds.get(patch.image_crop_ref.image_id.as_str())?;
        let seed = rng::derive_seed(self.seed, &patch.patch_id, 0);
        simulate_classifier(patch, world, self.taxonomy, self.noise, seed).ok()
    }
}
