//! Zero-shot classification filter for detected patches.
//!
//! A patch survives when the classifier, asked to choose among every concept
//! of the taxonomy, prefers a concept of the class the detector was queried
//! for, with enough probability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::Patch;
use crate::taxonomy::{ClassId, RelabelMap, Taxonomy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZsError {
    #[error("softmax of an empty score set")]
    Empty,
    #[error("non-finite logit {0}")]
    NonFinite(f64),
    #[error("concept {0:?} does not belong to any class")]
    UnknownConcept(String),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

/// Raw similarity logits of one patch against concept prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptScores {
    pub patch_id: String,
    pub logits: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierThresholds {
    pub per_class: BTreeMap<ClassId, f64>,
    pub default: f64,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        ClassifierThresholds {
            per_class: BTreeMap::new(),
            default: 0.5,
        }
    }
}

impl ClassifierThresholds {
    /// terrain 0.1, truck 0.5, train 0.5.
    pub fn cityscapes_defaults(target: &Taxonomy) -> Self {
        let mut t = ClassifierThresholds::default();
        for (name, v) in [("terrain", 0.1), ("truck", 0.5), ("train", 0.5)] {
            if let Ok(id) = target.id_of(name) {
                t.per_class.insert(id, v);
            }
        }
        t
    }

    pub fn threshold(&self, class: ClassId) -> f64 {
        self.per_class.get(&class).copied().unwrap_or(self.default)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, ZsError> {
    if logits.is_empty() {
        return Err(ZsError::Empty);
    }
    if let Some(&bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(ZsError::NonFinite(bad));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassVerdict {
    pub accepted: bool,
    pub predicted_class: ClassId,
    /// Probability of the predicted class.
    pub probability: f64,
    /// Probability of the queried class (0 when none of its concepts were scored).
    pub query_probability: f64,
}

/// Probability per class: the best of its concepts' softmax probabilities.
/// Classes come back in taxonomy order; classes with no scored concept are
/// omitted.
pub fn class_probabilities(
    scores: &ConceptScores,
    taxonomy: &Taxonomy,
) -> Result<Vec<(ClassId, f64)>, ZsError> {
    for concept in scores.logits.keys() {
        if taxonomy.class_of_concept(concept).is_none() {
            return Err(ZsError::UnknownConcept(concept.clone()));
        }
    }
    let ordered: Vec<(ClassId, f64)> = taxonomy
        .all_concepts()
        .into_iter()
        .filter_map(|(class, concept)| scores.logits.get(concept).map(|&l| (class, l)))
        .collect();
    let logits: Vec<f64> = ordered.iter().map(|&(_, l)| l).collect();
    let probs = softmax(&logits)?;
    let mut per_class: Vec<(ClassId, f64)> = Vec::new();
    for (&(class, _), p) in ordered.iter().zip(probs) {
        match per_class.iter_mut().find(|(c, _)| *c == class) {
            Some(entry) => entry.1 = entry.1.max(p),
            None => per_class.push((class, p)),
        }
    }
    Ok(per_class)
}

/// Decides whether a patch detected for `query_class` really shows that
/// class. Ties go to the concept listed first in the taxonomy; the
/// threshold comparison is inclusive.
pub fn classify_patch(
    scores: &ConceptScores,
    query_class: ClassId,
    taxonomy: &Taxonomy,
    thresholds: &ClassifierThresholds,
) -> Result<ClassVerdict, ZsError> {
    let per_class = class_probabilities(scores, taxonomy)?;
    // Taxonomy order plus strict comparison gives first-listed-wins ties.
    let (predicted_class, probability) = per_class
        .iter()
        .copied()
        .fold(None, |best: Option<(ClassId, f64)>, (c, p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((c, p)),
        })
        .expect("softmax input is non-empty");
    let query_probability = per_class
        .iter()
        .find(|(c, _)| *c == query_class)
        .map_or(0.0, |&(_, p)| p);
    let accepted = predicted_class == query_class && probability >= thresholds.threshold(query_class);
    Ok(ClassVerdict {
        accepted,
        predicted_class,
        probability,
        query_probability,
    })
}

/// True iff the patch's pseudo-label holds at least one pixel of any
/// Map.From class. Patches failing this need no relabeling at all.
pub fn precheck_contains_from(patch: &Patch, map: &RelabelMap) -> bool {
    let mut from = [false; 256];
    for id in map.from_ids() {
        from[id as usize] = true;
    }
    patch.cropped_label.data().iter().any(|&v| from[v as usize])
}

/// Parses classification JSON Lines (`patch_id`, `logits`).
pub fn parse_classifications(text: &str) -> Result<Vec<ConceptScores>, ZsError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConceptScores = serde_json::from_str(line).map_err(|e| ZsError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.logits.is_empty() {
            return Err(ZsError::Record {
                line: i + 1,
                message: "record has no logits".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_classifications(records: &[ConceptScores]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{extract_patches, Detection};
    use crate::presets;
    use crate::raster::{BBox, LabelRaster};

    fn scores(pairs: &[(&str, f64)]) -> ConceptScores {
        ConceptScores {
            patch_id: "p".into(),
            logits: pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), [0.5, 0.5]);
        let p = softmax(&[2.0, 0.0]).unwrap();
        // e^2 / (e^2 + 1)
        let e2 = std::f64::consts::E * std::f64::consts::E;
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.880797).abs() < 1e-6 && (p[1] - 0.119203).abs() < 1e-6);
        for c in [-1e3, 0.0, 7.5, 1e3] {
            for v in softmax(&[c, c, c]).unwrap() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert_eq!(softmax(&[]), Err(ZsError::Empty));
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(ZsError::NonFinite(_))));
    }

    #[test]
    fn truck_accepted() {
        let tax = presets::cityscapes();
        let t = ClassifierThresholds::cityscapes_defaults(&tax);
        let v = classify_patch(&scores(&[("truck", 3.0), ("car", 0.0), ("van", 0.0)]), 14, &tax, &t).unwrap();
        let e3 = 3f64.exp();
        assert_eq!(v.predicted_class, 14);
        assert!((v.probability - e3 / (e3 + 2.0)).abs() < 1e-12);
        assert!(v.accepted);
    }

    #[test]
    fn van_detected_as_truck_rejected() {
        let tax = presets::cityscapes();
        let t = ClassifierThresholds::cityscapes_defaults(&tax);
        let v = classify_patch(&scores(&[("van", 3.0), ("truck", 0.0), ("car", 0.0)]), 14, &tax, &t).unwrap();
        assert_eq!(v.predicted_class, 13);
        assert!(!v.accepted);
    }

    #[test]
    fn uniform_terrain_boundary() {
        let tax = presets::cityscapes();
        let t = ClassifierThresholds::cityscapes_defaults(&tax);
        let terrain = tax.id_of("terrain").unwrap();
        // 10 concepts: vegetation's 3 come before terrain's 5 in taxonomy order
        let uniform = scores(&[
            ("vegetation", 1.0), ("tree", 1.0), ("hedge", 1.0),
            ("terrain", 1.0), ("grass", 1.0), ("soil", 1.0), ("sand", 1.0), ("roadside grass", 1.0),
            ("car", 1.0), ("bus", 1.0),
        ]);
        let v = classify_patch(&uniform, terrain, &tax, &t).unwrap();
        assert_eq!(v.probability, 0.1);
        assert_eq!(v.predicted_class, tax.id_of("vegetation").unwrap());
        assert!(!v.accepted);

        let terrain_first = scores(&[
            ("terrain", 1.0), ("grass", 1.0), ("soil", 1.0), ("sand", 1.0), ("roadside grass", 1.0),
            ("car", 1.0), ("jeep", 1.0), ("SUV", 1.0), ("van", 1.0), ("bus", 1.0),
        ]);
        let v = classify_patch(&terrain_first, terrain, &tax, &t).unwrap();
        assert_eq!(v.probability, 0.1);
        assert!(v.accepted, "0.1 >= 0.1 must pass");
    }

    #[test]
    fn unknown_concept_is_error() {
        let tax = presets::cityscapes();
        let r = classify_patch(&scores(&[("boat", 1.0)]), 14, &tax, &ClassifierThresholds::default());
        assert_eq!(r, Err(ZsError::UnknownConcept("boat".into())));
    }

    fn patch_over(label: LabelRaster) -> Patch {
        let det = Detection {
            image_id: "i".into(),
            query_class: 14,
            concept: "truck".into(),
            bbox: BBox::full(label.width(), label.height()),
            score: 0.9,
        };
        extract_patches(&label, &[det], "i").remove(0)
    }

    #[test]
    fn precheck_cases() {
        let map = RelabelMap::predefined(&[(13, 14)]);
        assert!(precheck_contains_from(&patch_over(LabelRaster::filled(2, 2, 13)), &map));
        assert!(!precheck_contains_from(&patch_over(LabelRaster::filled(2, 2, 0)), &map));
        assert!(!precheck_contains_from(&patch_over(LabelRaster::filled(2, 2, 13)), &RelabelMap::default()));
    }

    #[test]
    fn classification_wire_round_trip() {
        let recs = vec![scores(&[("truck", 1.5), ("car", -0.25)])];
        let text = write_classifications(&recs);
        assert_eq!(parse_classifications(&text).unwrap(), recs);
        assert!(matches!(
            parse_classifications("{\"patch_id\":\"p\",\"logits\":{}}"),
            Err(ZsError::Record { line: 1, .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn logits() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-20.0f64..20.0, 1..12)
        }

        proptest! {
            #[test]
            fn softmax_sums_to_one(l in logits()) {
                let p = softmax(&l).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|&v| v > 0.0));
            }

            #[test]
            fn argmax_shift_invariant(l in logits(), c in -100.0f64..100.0) {
                let argmax = |p: &[f64]| p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
                let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
                prop_assert_eq!(argmax(&softmax(&l).unwrap()), argmax(&softmax(&shifted).unwrap()));
            }

            // Raising the query class's best concept never turns an accept into a reject.
            #[test]
            fn acceptance_monotone_in_best_query_concept(
                truck in proptest::collection::vec(-5.0f64..5.0, 4),
                car in proptest::collection::vec(-5.0f64..5.0, 4),
                bump in 0.0f64..5.0,
            ) {
                let tax = presets::cityscapes();
                let t = ClassifierThresholds::cityscapes_defaults(&tax);
                let truck_c = ["truck", "box truck", "pickup truck", "truck trailer"];
                let car_c = ["car", "jeep", "SUV", "van"];
                let mut s = ConceptScores { patch_id: "p".into(), logits: BTreeMap::new() };
                for (k, v) in truck_c.iter().zip(&truck) { s.logits.insert(k.to_string(), *v); }
                for (k, v) in car_c.iter().zip(&car) { s.logits.insert(k.to_string(), *v); }
                let before = classify_patch(&s, 14, &tax, &t).unwrap();
                let best = truck_c.iter().copied().fold("truck", |b, k| if s.logits[k] > s.logits[b] { k } else { b });
                *s.logits.get_mut(best).unwrap() += bump;
                let after = classify_patch(&s, 14, &tax, &t).unwrap();
                prop_assert!(!before.accepted || after.accepted);
                prop_assert!(after.query_probability >= before.query_probability - 1e-12);
            }
        }
    }

    /// With max-over-concepts class probabilities, raising a non-best
    /// concept of the query class can lower its probability.
    #[test]
    fn raising_secondary_concept_can_reject() {
        let tax = presets::cityscapes();
        let t = ClassifierThresholds::cityscapes_defaults(&tax);
        let before = classify_patch(&scores(&[("truck", 3.0), ("box truck", 0.0), ("car", 0.0)]), 14, &tax, &t).unwrap();
        let after = classify_patch(&scores(&[("truck", 3.0), ("box truck", 3.0), ("car", 0.0)]), 14, &tax, &t).unwrap();
        assert!(before.accepted);
        assert!(!after.accepted);
    }
}
