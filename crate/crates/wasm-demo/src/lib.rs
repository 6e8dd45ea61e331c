//! Browser demo over the relabeling engine. Three views: one simulated
//! scene before and after relabeling, self-training curves with and without
//! relabeling, and an NMS explorer. The plain functions hold the logic; the
//! `wasm_bindgen` wrappers at the bottom only convert types.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use csi_core::detect::nms_indices;
use csi_core::metrics::ConfusionMatrix;
use csi_core::palette::color;
use csi_core::relabel::{candidate_patches, judge_patch, CsiContext, PatchFate};
use csi_core::rng::derive_seed;
use csi_core::sim::{
    folded_pseudo_label, generate_scene, presets, run_experiment, simulate_detector, SimScorer,
};
use csi_core::{apply_csi, presets as taxonomies, BBox, ClassId, ConfidenceRaster, Detection, LabelRaster};
use csi_core::{RelabelMap, RelabelSchedule, Taxonomy};

/// Full map for the simulated taxonomies, automap's bus->train included.
const SCENE_MAP: [(ClassId, ClassId); 3] = [(8, 9), (13, 14), (15, 16)];

pub fn rgba(raster: &LabelRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(raster.len() * 4);
    for &v in raster.data() {
        let [r, g, b] = color(v);
        out.extend_from_slice(&[r, g, b, 255]);
    }
    out
}

fn name(tax: &Taxonomy, id: ClassId) -> String {
    tax.name_of(id).map_or_else(|| id.to_string(), str::to_string)
}

fn class_ious(pred: &LabelRaster, gt: &LabelRaster, tax: &Taxonomy) -> Result<Value, String> {
    let mut cm = ConfusionMatrix::new(tax.id_span());
    cm.accumulate(pred, gt).map_err(|e| e.to_string())?;
    let ious = cm.iou_per_class();
    Ok(tax.ids().map(|id| (name(tax, id), json!(ious[id as usize]))).collect::<serde_json::Map<_, _>>().into())
}

pub struct Scene {
    pub gt: LabelRaster,
    pub pseudo: LabelRaster,
    pub relabeled: LabelRaster,
    pub info: Value,
}

/// One target scene: its ground truth, the folded pseudo-label a source
/// teacher would produce, and that pseudo-label after relabeling.
pub fn build_scene(seed: u64, false_positive_rate: f64, jitter: u32, classifier_filter: bool) -> Result<Scene, String> {
    let (source, target) = (taxonomies::sim_source(), taxonomies::sim_target());
    let mut cfg = presets::noisy(seed, false_positive_rate, classifier_filter);
    cfg.noise.box_jitter_px = jitter;
    cfg.noise.validate().map_err(|e| e.to_string())?;
    let world = generate_scene(&cfg.target_scene, "scene", derive_seed(seed, "scene", 0)).map_err(|e| e.to_string())?;
    let pseudo = folded_pseudo_label(&world, &source);

    let mut dets: Vec<Detection> = Vec::new();
    for (_, to) in SCENE_MAP {
        dets.extend(
            simulate_detector(&world, to, &target, &cfg.noise, derive_seed(seed, "det", to as u64))
                .map_err(|e| e.to_string())?,
        );
    }
    let map = RelabelMap::predefined(&SCENE_MAP);
    let schedule = RelabelSchedule::new(0, 0, 1).map_err(|e| e.to_string())?;
    let ctx = CsiContext { map: &map, taxonomy: &target, params: &cfg.csi_params, schedule: &schedule };
    let scorer = SimScorer::new([&world], &target, &cfg.noise, derive_seed(seed, "cls", 0));

    let mut patches = Vec::new();
    for p in candidate_patches(&pseudo, &dets, &cfg.csi_params.detector).map_err(|e| e.to_string())? {
        let fate = match judge_patch(&p, &scorer, &ctx).map_err(|e| e.to_string())? {
            PatchFate::Unmapped => "unmapped",
            PatchFate::PrecheckedOut => "prechecked out",
            PatchFate::FilteredOut => "filtered out",
            PatchFate::Accepted => "accepted",
        };
        patches.push(json!({
            "class": name(&target, p.query_class()),
            "box": p.bbox().as_array(),
            "score": p.detection.score,
            "fate": fate,
        }));
    }
    let conf = ConfidenceRaster::filled(pseudo.width(), pseudo.height(), 0.9);
    let (relabeled, _, report) = apply_csi(0, &pseudo, &conf, &dets, &scorer, &ctx).map_err(|e| e.to_string())?;

    let info = json!({
        "width": pseudo.width(),
        "height": pseudo.height(),
        "detections": dets.len(),
        "patches": patches,
        "report": report.to_text(&target),
        "iou_before": class_ious(&pseudo, &world.gt_labels, &target)?,
        "iou_after": class_ious(&relabeled, &world.gt_labels, &target)?,
    });
    Ok(Scene { gt: world.gt_labels, pseudo, relabeled, info })
}

/// Validation mIoU over training for paired runs with and without
/// relabeling.
pub fn training_curves(seed: u64, total_steps: u64, relabel_start: f64, false_positive_rate: f64) -> Result<Value, String> {
    if !(20..=5000).contains(&total_steps) {
        return Err(format!("total steps {total_steps} outside 20..=5000"));
    }
    if !(0.05..=0.95).contains(&relabel_start) {
        return Err(format!("relabel start {relabel_start} outside 0.05..=0.95"));
    }
    let (source, target) = (taxonomies::sim_source(), taxonomies::sim_target());
    let run = |csi: bool| -> Result<Value, String> {
        let mut cfg = presets::mechanism(seed, csi);
        let schedule = RelabelSchedule::scaled(total_steps);
        cfg.total_steps = total_steps;
        cfg.relabel_start_step = schedule.relabel_start_step;
        cfg.collect_start_step = schedule.collect_start_step;
        cfg = cfg.with_relabel_start(relabel_start);
        cfg.eval_every = (total_steps / 20).max(1);
        cfg.noise.false_positive_rate = false_positive_rate;
        cfg.noise.box_jitter_px = if false_positive_rate > 0.0 { 1 } else { 0 };
        let r = run_experiment(&cfg, &source, &target).map_err(|e| e.to_string())?;
        Ok(json!({
            "relabel_start_step": r.relabel_start_step,
            "steps": r.trajectory.iter().map(|p| p.step).collect::<Vec<_>>(),
            "common": r.trajectory.iter().map(|p| p.common_miou).collect::<Vec<_>>(),
            "new": r.trajectory.iter().map(|p| p.new_miou).collect::<Vec<_>>(),
            "final_iou": r.new_classes.iter().map(|c| json!({"class": c, "iou": r.final_iou(c)})).collect::<Vec<_>>(),
            "map": r.relabel_map.iter().map(|e| format!("{} -> {} ({:?})", e.from, e.to, e.origin)).collect::<Vec<_>>(),
        }))
    };
    Ok(json!({ "with_csi": run(true)?, "without_csi": run(false)? }))
}

/// Greedy per-class NMS over boxes given as
/// `[{"box": [x0, y0, x1, y1], "score": s, "class": c}]`.
pub fn nms_explore(boxes_json: &str, iou_threshold: f64) -> Result<Value, String> {
    let raw: Vec<Value> = serde_json::from_str(boxes_json).map_err(|e| e.to_string())?;
    let dets = raw
        .iter()
        .map(|v| {
            let b: Vec<u32> = serde_json::from_value(v["box"].clone()).map_err(|e| e.to_string())?;
            let [x0, y0, x1, y1] = b[..] else {
                return Err("box needs four coordinates".to_string());
            };
            Ok(Detection {
                image_id: "canvas".into(),
                query_class: v["class"].as_u64().unwrap_or(0) as ClassId,
                concept: String::new(),
                bbox: BBox::new(x0, y0, x1, y1).map_err(|e| e.to_string())?,
                score: v["score"].as_f64().ok_or("score missing")?,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(json!({ "kept": nms_indices(&dets, iou_threshold) }))
}

#[wasm_bindgen]
pub struct SceneView {
    inner: Scene,
}

#[wasm_bindgen]
impl SceneView {
    pub fn width(&self) -> u32 {
        self.inner.gt.width()
    }

    pub fn height(&self) -> u32 {
        self.inner.gt.height()
    }

    pub fn gt_rgba(&self) -> Vec<u8> {
        rgba(&self.inner.gt)
    }

    pub fn pseudo_rgba(&self) -> Vec<u8> {
        rgba(&self.inner.pseudo)
    }

    pub fn relabeled_rgba(&self) -> Vec<u8> {
        rgba(&self.inner.relabeled)
    }

    pub fn info_json(&self) -> String {
        self.inner.info.to_string()
    }
}

#[wasm_bindgen]
pub fn scene(seed: u32, false_positive_rate: f64, jitter: u32, classifier_filter: bool) -> Result<SceneView, JsError> {
    build_scene(seed as u64, false_positive_rate, jitter, classifier_filter)
        .map(|inner| SceneView { inner })
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn curves(seed: u32, total_steps: u32, relabel_start: f64, false_positive_rate: f64) -> Result<String, JsError> {
    training_curves(seed as u64, total_steps as u64, relabel_start, false_positive_rate)
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn nms(boxes_json: &str, iou_threshold: f64) -> Result<String, JsError> {
    nms_explore(boxes_json, iou_threshold).map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}
