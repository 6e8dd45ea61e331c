//! Randomized oracle suites shared by the integration tests and the
//! acceptance runner. Each suite returns a one-line summary or the first
//! counterexample.

#![allow(dead_code)]

use std::collections::VecDeque;

use csi_core::detect::{box_iou, nms, parse_detections, write_detections};
use csi_core::raster::{
    connected_components, crop, paste, read_confidence, read_raster, write_confidence, write_raster,
};
use csi_core::relabel::CsiContext;
use csi_core::rng::stream;
use csi_core::sim::{ema_update, loss_and_grad, PixelClassifier, SimWorld};
use csi_core::taxonomy::validate_map;
use csi_core::zsfilter::{parse_classifications, write_classifications};
use csi_core::{
    apply_csi, presets, BBox, ClassId, ConceptScores, ConfidenceRaster, CsiParams, Detection, LabelRaster, Patch,
    RelabelMap, RelabelSchedule, Taxonomy, IGNORE_ID,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

fn random_box(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BBox {
    let x0 = rng.random_range(0..w);
    let y0 = rng.random_range(0..h);
    let x1 = rng.random_range(x0 + 1..=w);
    let y1 = rng.random_range(y0 + 1..=h);
    BBox::new(x0, y0, x1, y1).unwrap()
}

fn random_raster(rng: &mut ChaCha8Rng, w: u32, h: u32, palette: &[ClassId]) -> LabelRaster {
    let data = (0..w * h).map(|_| *palette.choose(rng).unwrap()).collect();
    LabelRaster::new(w, h, data).unwrap()
}

/// Pixel-counting IoU, independent of the box arithmetic under test.
fn iou_by_pixels(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..a.y_max.max(b.y_max) {
        for x in 0..a.x_max.max(b.x_max) {
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// The greedy result is the unique subset S where a box is in S exactly
/// when no earlier-ranked member of S of its class overlaps it past the
/// threshold. Enumerate every subset and keep those satisfying that.
fn nms_exhaustive(dets: &[Detection], thr: f64) -> Vec<Vec<usize>> {
    let n = dets.len();
    let before = |j: usize, i: usize| dets[j].score > dets[i].score || (dets[j].score == dets[i].score && j < i);
    let mut fixed_points = Vec::new();
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| {
                j != i
                    && member(j)
                    && before(j, i)
                    && dets[j].query_class == dets[i].query_class
                    && iou_by_pixels(&dets[j].bbox, &dets[i].bbox) > thr
            });
            member(i) == !blocked
        });
        if consistent {
            fixed_points.push((0..n).filter(|&i| member(i)).collect());
        }
    }
    fixed_points
}

pub fn nms_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "nms-oracle", 0);
    let mut kept_total = 0;
    for case in 0..instances {
        let n = rng.random_range(0..=10);
        let thr = *[0.0, 0.1, 0.3, 0.5, 0.7, 1.0].choose(&mut rng).unwrap();
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                image_id: "x".into(),
                query_class: rng.random_range(13..=14),
                concept: "c".into(),
                bbox: random_box(&mut rng, 12, 12),
                // Coarse scores so ties are common.
                score: rng.random_range(0..6) as f64 / 5.0,
            })
            .collect();
        for a in &dets {
            for b in &dets {
                let (fast, slow) = (box_iou(&a.bbox, &b.bbox), iou_by_pixels(&a.bbox, &b.bbox));
                if (fast - slow).abs() > 1e-12 {
                    return Err(format!("case {case}: iou {fast} vs {slow} for {:?} {:?}", a.bbox, b.bbox));
                }
            }
        }
        let oracle = nms_exhaustive(&dets, thr);
        if oracle.len() != 1 {
            return Err(format!("case {case}: {} fixed points", oracle.len()));
        }
        let expected: Vec<Detection> = oracle[0].iter().map(|&i| dets[i].clone()).collect();
        let got = nms(&dets, thr);
        if got != expected {
            return Err(format!("case {case}: greedy kept {} boxes, oracle {}", got.len(), expected.len()));
        }
        if nms(&got, thr) != got {
            return Err(format!("case {case}: nms not idempotent"));
        }
        kept_total += got.len();
    }
    Ok(format!("{instances} instances, {kept_total} boxes kept, exact match"))
}

pub fn crop_paste_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "crop-paste", 0);
    for case in 0..instances {
        let (w, h) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let base = random_raster(&mut rng, w, h, &[0, 2, 13, IGNORE_ID]);
        let other = random_raster(&mut rng, w, h, &[8, 15]);
        let b = random_box(&mut rng, w, h);
        let origin = (b.x_min, b.y_min);

        let c = crop(&base, &b).map_err(|e| e.to_string())?;
        if paste(&base, &c, origin).map_err(|e| e.to_string())? != base {
            return Err(format!("case {case}: paste(r, crop(r, b)) != r for {b:?}"));
        }
        let patch = crop(&other, &b).unwrap();
        let mixed = paste(&base, &patch, origin).unwrap();
        if crop(&mixed, &b).unwrap() != patch {
            return Err(format!("case {case}: crop after paste differs"));
        }
        for y in 0..h {
            for x in 0..w {
                if !b.contains(x, y) && mixed.get(x, y) != base.get(x, y) {
                    return Err(format!("case {case}: paste touched ({x},{y}) outside {b:?}"));
                }
            }
        }
    }
    Ok(format!("{instances} (raster, box) pairs"))
}

fn flood_fill_boxes(r: &LabelRaster, class: ClassId) -> Vec<BBox> {
    let (w, h) = (r.width() as i64, r.height() as i64);
    let mut seen = vec![false; r.len()];
    let mut boxes = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            let s = (sy * w + sx) as usize;
            if seen[s] || r.data()[s] != class {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
            let mut queue = VecDeque::from([(sx, sy)]);
            seen[s] = true;
            while let Some((x, y)) = queue.pop_front() {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
                for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let i = (ny * w + nx) as usize;
                    if !seen[i] && r.data()[i] == class {
                        seen[i] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            boxes.push(BBox::new(x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1).unwrap());
        }
    }
    boxes
}

pub fn components_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "components", 0);
    let mut found = 0;
    for case in 0..instances {
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let r = random_raster(&mut rng, w, h, &[0, 0, 5, 5, 5, 7]);
        for class in [0, 5, 7, 9] {
            let (got, want) = (connected_components(&r, class), flood_fill_boxes(&r, class));
            if got != want {
                return Err(format!("case {case} class {class}: {} boxes vs flood fill {}", got.len(), want.len()));
            }
            found += got.len();
        }
    }
    Ok(format!("{instances} rasters, {found} components"))
}

fn random_model(rng: &mut ChaCha8Rng, classes: Vec<ClassId>, dim: usize, scale: f64) -> PixelClassifier {
    let mut m = PixelClassifier::zeros(classes, dim);
    m.weights.iter_mut().chain(m.bias.iter_mut()).for_each(|v| *v = rng.random_range(-scale..scale));
    m
}

pub fn ema_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "ema", 0);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let alpha = *[0.0, 0.5, 0.9, 0.99, 0.999, 1.0].choose(&mut rng).unwrap();
        let theta = random_model(&mut rng, vec![0, 1, 2], 4, 5.0);
        let phi0 = random_model(&mut rng, vec![0, 1, 2], 4, 5.0);
        let mut phi = phi0.clone();
        for t in 1..=20 {
            phi = ema_update(&phi, &theta, alpha).map_err(|e| e.to_string())?;
            let params = |m: &PixelClassifier| m.weights.iter().chain(&m.bias).copied().collect::<Vec<_>>();
            let (p, p0, th) = (params(&phi), params(&phi0), params(&theta));
            for k in 0..p.len() {
                let want = alpha.powi(t) * (p0[k] - th[k]);
                let err = ((p[k] - th[k]) - want).abs();
                worst = worst.max(err);
                if err > 1e-9 * (1.0 + (p0[k] - th[k]).abs()) {
                    return Err(format!("case {case} step {t} param {k}: gap {} want {want}", p[k] - th[k]));
                }
            }
        }
    }
    Ok(format!("{instances} trajectories x 20 steps, worst gap error {worst:.1e}"))
}

pub fn gradient_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "fd", 0);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for case in 0..instances {
        let (w, hh, dim) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let classes: Vec<ClassId> = vec![0, 3, 7];
        let n = (w * hh) as usize;
        let world = SimWorld {
            image_id: "fd".into(),
            gt_labels: LabelRaster::filled(w, hh, 0),
            features: (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
            dim,
            placements: vec![],
            confusable: vec![],
            rng_seed: 0,
        };
        let labels = random_raster(&mut rng, w, hh, &[0, 3, 7, IGNORE_ID]);
        let q = if rng.random_bool(0.5) {
            Some(ConfidenceRaster::new(w, hh, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        } else {
            None
        };
        let model = random_model(&mut rng, classes, dim, 1.0);
        let loss = |m: &PixelClassifier| loss_and_grad(m, &world, &labels, q.as_ref()).unwrap().0.value;
        let (_, grad) = loss_and_grad(&model, &world, &labels, q.as_ref()).map_err(|e| e.to_string())?;

        let analytic: Vec<f64> = grad.weights.iter().chain(&grad.bias).copied().collect();
        let nw = model.weights.len();
        for (k, &g) in analytic.iter().enumerate() {
            let bump = |delta: f64| {
                let mut m = model.clone();
                if k < nw {
                    m.weights[k] += delta;
                } else {
                    m.bias[k - nw] += delta;
                }
                loss(&m)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            if rel > 1e-4 {
                return Err(format!("case {case} param {k}: analytic {g} vs finite difference {fd}"));
            }
        }
    }
    Ok(format!("{instances} instances, worst relative error {worst:.1e}"))
}

/// Random valid map over Cityscapes: distinct from-classes, to-classes
/// disjoint from them.
fn random_map(rng: &mut ChaCha8Rng) -> RelabelMap {
    let mut ids: Vec<ClassId> = (0..19).collect();
    ids.shuffle(rng);
    let n_to = rng.random_range(1..=3);
    let (to, rest) = ids.split_at(n_to);
    let n_from = rng.random_range(n_to..=n_to + 3);
    let pairs: Vec<(ClassId, ClassId)> = rest[..n_from]
        .iter()
        .enumerate()
        .map(|(i, &f)| (f, to[i % n_to]))
        .collect();
    RelabelMap::predefined(&pairs)
}

fn source_without_targets(tax: &Taxonomy, map: &RelabelMap) -> Taxonomy {
    let to = map.to_ids();
    let classes = tax.classes().iter().filter(|c| !to.contains(&c.id)).cloned().collect();
    Taxonomy::new("source", classes).unwrap()
}

fn hashed_scores(tax: &Taxonomy, seed: u64) -> impl Fn(&Patch) -> Option<ConceptScores> + '_ {
    move |p: &Patch| {
        let mut rng = stream(seed, &p.patch_id, 0);
        let logits = tax
            .all_concepts()
            .into_iter()
            .map(|(_, k)| (k.to_string(), rng.random_range(-2.0..4.0)))
            .collect();
        Some(ConceptScores { patch_id: p.patch_id.clone(), logits })
    }
}

/// Map application and apply_csi are both idempotent. Boxes overlap freely,
/// across query classes too.
pub fn idempotence_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "idempotence", 0);
    let tax = presets::cityscapes();
    let schedule = RelabelSchedule::new(0, 0, 1).unwrap();
    let mut relabeled = 0u64;
    for case in 0..instances {
        let map = random_map(&mut rng);
        let source = source_without_targets(&tax, &map);
        validate_map(&map, &source, &tax).map_err(|v| format!("case {case}: generator built invalid map {v:?}"))?;
        let mut palette: Vec<ClassId> = map.from_ids().chain(map.to_ids()).collect();
        palette.extend([0, IGNORE_ID]);
        let (w, h) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let label = random_raster(&mut rng, w, h, &palette);

        let once = map.apply(&label);
        if map.apply(&once) != once {
            return Err(format!("case {case}: map application not idempotent"));
        }

        let to: Vec<ClassId> = map.to_ids().into_iter().collect();
        let mut dets: Vec<Detection> = Vec::new();
        for _ in 0..rng.random_range(0..10) {
            let d = Detection {
                image_id: "img".into(),
                query_class: *to.choose(&mut rng).unwrap(),
                concept: "c".into(),
                bbox: random_box(&mut rng, w, h),
                score: rng.random_range(0.0..1.0),
            };
            dets.push(d);
        }
        let mut params = CsiParams::cityscapes_defaults(&tax);
        params.classifier_filter = rng.random_bool(0.5);
        params.relabel_confidence = 0.75;
        let ctx = CsiContext { map: &map, taxonomy: &tax, params: &params, schedule: &schedule };
        let scores = hashed_scores(&tax, seed ^ case as u64);
        let conf = ConfidenceRaster::filled(w, h, 0.5);
        let (l1, c1, _) = apply_csi(0, &label, &conf, &dets, &scores, &ctx).map_err(|e| e.to_string())?;
        let (l2, c2, r2) = apply_csi(0, &l1, &c1, &dets, &scores, &ctx).map_err(|e| e.to_string())?;
        if l2 != l1 || !c2.bitwise_eq(&c1) || !r2.pixels_relabeled_per_class.is_empty() {
            return Err(format!("case {case}: second apply_csi changed the output"));
        }
        relabeled += l1.data().iter().zip(label.data()).filter(|(a, b)| a != b).count() as u64;
    }
    Ok(format!("{instances} (raster, map) pairs, {relabeled} pixels relabeled on first pass"))
}

pub fn raster_roundtrip_suite(seed: u64, include_max: bool) -> Outcome {
    let mut rng = stream(seed, "raster-io", 0);
    let mut sizes: Vec<(u32, u32)> = vec![(1, 1), (1, 7), (64, 64)];
    sizes.extend((0..20).map(|_| (rng.random_range(1..300), rng.random_range(1..300))));
    if include_max {
        sizes.push((4096, 4096));
    }
    for &(w, h) in &sizes {
        let n = (w as usize) * (h as usize);
        let labels = LabelRaster::new(w, h, (0..n).map(|_| rng.random()).collect()).unwrap();
        let bytes = write_raster(&labels);
        if bytes.len() != 13 + n || read_raster(&bytes).map_err(|e| e.to_string())? != labels {
            return Err(format!("label raster {w}x{h} did not round-trip"));
        }
        let mut conf: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        for (slot, v) in conf.iter_mut().zip([0.0, 1.0, f32::MIN_POSITIVE, 1e-45]) {
            *slot = v;
        }
        let conf = ConfidenceRaster::new(w, h, conf).unwrap();
        let bytes = write_confidence(&conf);
        if bytes.len() != 13 + 4 * n || !read_confidence(&bytes).map_err(|e| e.to_string())?.bitwise_eq(&conf) {
            return Err(format!("confidence raster {w}x{h} did not round-trip"));
        }
    }
    let largest = sizes.iter().map(|&(w, h)| w as u64 * h as u64).max().unwrap();
    Ok(format!("{} shapes, largest {largest} pixels, bitwise identical", sizes.len()))
}

pub fn jsonl_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = stream(seed, "jsonl", 0);
    let tax = presets::cityscapes();
    let concepts = tax.all_concepts();
    for case in 0..instances {
        let dets: Vec<Detection> = (0..rng.random_range(0..6))
            .map(|i| {
                let (class, concept) = *concepts.choose(&mut rng).unwrap();
                Detection {
                    image_id: format!("img \"{case}\"/{i}"),
                    query_class: class,
                    concept: concept.to_string(),
                    bbox: random_box(&mut rng, 4096, 4096),
                    score: rng.random_range(0.0..=1.0),
                }
            })
            .collect();
        let text = write_detections(&dets, &tax);
        let parsed = parse_detections(&text, &tax).map_err(|e| format!("case {case}: {e}"))?;
        if parsed != dets || write_detections(&parsed, &tax) != text {
            return Err(format!("case {case}: detections not stable under parse-emit-parse"));
        }

        let recs: Vec<ConceptScores> = (0..rng.random_range(0..6))
            .map(|i| ConceptScores {
                patch_id: format!("img{case}#{i}"),
                logits: concepts
                    .iter()
                    .take(rng.random_range(1..=concepts.len()))
                    .map(|&(_, k)| (k.to_string(), rng.random_range(-1e3..1e3)))
                    .collect(),
            })
            .collect();
        let text = write_classifications(&recs);
        let parsed = parse_classifications(&text).map_err(|e| format!("case {case}: {e}"))?;
        if parsed != recs || write_classifications(&parsed) != text {
            return Err(format!("case {case}: classifications not stable under parse-emit-parse"));
        }
    }
    Ok(format!("{instances} detection and classification files"))
}
