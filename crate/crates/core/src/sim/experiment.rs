use serde::{Deserialize, Serialize};

use super::{
    ema_update, generate_scene, loss_and_grad, pseudo_label, simulate_detector, NoiseConfig, PixelClassifier,
    SceneConfig, SimError, SimScorer, SimWorld,
};
use crate::automap::{collect_image_votes, finalize_map, open_classes, AutoMapConfig, CandidateCounts};
use crate::detect::Detection;
use crate::metrics::{mean_iou, ConfusionMatrix, MIoUSpec, MetricReport};
use crate::relabel::{apply_csi, CsiContext, CsiParams, RelabelReport, RelabelSchedule};
use crate::rng::derive_seed;
use crate::taxonomy::{validate_map, ClassId, MapOrigin, RelabelMap, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub relabel_start_step: u64,
    pub collect_start_step: u64,
    /// Off: plain self-training on teacher pseudo-labels.
    pub csi: bool,
    pub learning_rate: f64,
    pub ema_alpha: f64,
    /// Pixel confidence threshold behind the image-level weight q.
    pub tau: f64,
    pub source_scene: SceneConfig,
    pub target_scene: SceneConfig,
    pub source_worlds: usize,
    pub target_worlds: usize,
    pub val_worlds: usize,
    pub noise: NoiseConfig,
    pub csi_params: CsiParams,
    pub automap: AutoMapConfig,
    /// `[from, to]` pairs known before training.
    pub predefined_map: Vec<[ClassId; 2]>,
    pub eval_every: u64,
}

impl ExperimentConfig {
    pub fn schedule(&self) -> Result<RelabelSchedule, SimError> {
        Ok(RelabelSchedule::new(self.relabel_start_step, self.collect_start_step, self.total_steps)?)
    }

    /// Moves the relabel start (and the collection window with it, keeping
    /// its length) to `fraction` of the run.
    pub fn with_relabel_start(mut self, fraction: f64) -> Self {
        let window = self.relabel_start_step - self.collect_start_step;
        self.relabel_start_step = (self.total_steps as f64 * fraction).round() as u64;
        self.collect_start_step = self.relabel_start_step.saturating_sub(window);
        self
    }

    pub fn validate(&self, source: &Taxonomy, target: &Taxonomy) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        self.schedule()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {}", self.ema_alpha));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {}", self.tau));
        }
        if self.source_worlds == 0 || self.target_worlds == 0 || self.val_worlds == 0 {
            return bad("world counts must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.source_scene.dim() != self.target_scene.dim() {
            return bad("source and target feature dimensions differ".into());
        }
        self.source_scene.validate()?;
        self.target_scene.validate()?;
        self.noise.validate()?;
        let scene_classes = |s: &SceneConfig| {
            std::iter::once(s.background).chain(s.objects.iter().map(|o| o.class)).collect::<Vec<_>>()
        };
        if let Some(c) = scene_classes(&self.source_scene).into_iter().find(|c| !source.contains(*c)) {
            return bad(format!("source scene class {c} is not in the source taxonomy"));
        }
        if let Some(c) = scene_classes(&self.target_scene).into_iter().find(|c| !target.contains(*c)) {
            return bad(format!("target scene class {c} is not in the target taxonomy"));
        }
        validate_map(&self.predefined(), source, target)
            .map_err(|v| SimError::Config(format!("predefined map: {v:?}")))?;
        self.csi_params.detector.validate().map_err(SimError::Config)?;
        Ok(())
    }

    pub fn predefined(&self) -> RelabelMap {
        let pairs: Vec<(ClassId, ClassId)> = self.predefined_map.iter().map(|&[f, t]| (f, t)).collect();
        RelabelMap::predefined(&pairs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub source: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Number of completed training steps.
    pub step: u64,
    /// Aligned with [`ExperimentReport::classes`].
    pub iou: Vec<Option<f64>>,
    pub common_miou: Option<f64>,
    pub new_miou: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntryRecord {
    pub from: String,
    pub to: String,
    pub origin: MapOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub to: String,
    pub from: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub csi: bool,
    pub total_steps: u64,
    pub relabel_start_step: u64,
    pub classes: Vec<String>,
    pub common_classes: Vec<String>,
    pub new_classes: Vec<String>,
    pub losses: Vec<LossPoint>,
    pub trajectory: Vec<EvalPoint>,
    pub final_metrics: MetricReport,
    pub relabel_map: Vec<MapEntryRecord>,
    pub automap_votes: Vec<VoteRecord>,
    pub automap_warnings: Vec<String>,
    pub relabel: RelabelReport,
}

impl ExperimentReport {
    pub fn last(&self) -> &EvalPoint {
        self.trajectory.last().expect("at least one evaluation")
    }

    pub fn final_iou(&self, class: &str) -> Option<f64> {
        let i = self.classes.iter().position(|c| c == class)?;
        self.last().iou[i]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Split {
    common: Vec<ClassId>,
    new: Vec<ClassId>,
}

fn split_classes(source: &Taxonomy, target: &Taxonomy) -> Split {
    let (common, new) = target.ids().partition(|c| source.contains(*c));
    Split { common, new }
}

fn worlds(config: &SceneConfig, prefix: &str, count: usize, seed: u64) -> Result<Vec<SimWorld>, SimError> {
    (0..count)
        .map(|i| generate_scene(config, &format!("{prefix}-{i}"), derive_seed(seed, prefix, i as u64)))
        .collect()
}

fn evaluate(
    model: &PixelClassifier,
    val: &[SimWorld],
    target: &Taxonomy,
    split: &Split,
) -> Result<(EvalPoint, ConfusionMatrix), SimError> {
    let mut cm = ConfusionMatrix::new(target.id_span());
    for w in val {
        let pred = model.predict_labels(w)?;
        cm.accumulate(&pred, &w.gt_labels).map_err(|e| SimError::Shape(e.to_string()))?;
    }
    let ious = cm.iou_per_class();
    let all: Vec<ClassId> = target.ids().collect();
    let mean = |ids: &[ClassId]| mean_iou(&ious, &MIoUSpec::over(ids.to_vec())).ok();
    let point = EvalPoint {
        step: 0,
        iou: all.iter().map(|&c| ious[c as usize]).collect(),
        common_miou: mean(&split.common),
        new_miou: mean(&split.new),
        miou: mean(&all),
    };
    Ok((point, cm))
}

/// Teacher-student self-training on synthetic worlds.
///
/// Every step takes one labeled source world and one target world. The
/// target world's pseudo-label comes from the EMA teacher and, with CSI on,
/// goes through the relabel step. During the collection window verified
/// detections of open classes (new classes without a predefined entry) vote
/// for map entries, which are finalized at the relabel start. The student
/// is evaluated on held-out target worlds every `eval_every` steps.
pub fn run_experiment(
    config: &ExperimentConfig,
    source: &Taxonomy,
    target: &Taxonomy,
) -> Result<ExperimentReport, SimError> {
    config.validate(source, target)?;
    let schedule = config.schedule()?;
    let split = split_classes(source, target);
    let seed = config.seed;

    let src_worlds = worlds(&config.source_scene, "src", config.source_worlds, seed)?;
    let tgt_worlds = worlds(&config.target_scene, "tgt", config.target_worlds, seed)?;
    let val_worlds = worlds(&config.target_scene, "val", config.val_worlds, seed)?;

    let detections: Vec<Vec<Detection>> = if config.csi {
        tgt_worlds
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut all = Vec::new();
                for &c in &split.new {
                    all.extend(simulate_detector(w, c, target, &config.noise, derive_seed(seed, "det", i as u64))?);
                }
                Ok(all)
            })
            .collect::<Result<_, SimError>>()?
    } else {
        vec![Vec::new(); tgt_worlds.len()]
    };
    let scorer = SimScorer::new(&tgt_worlds, target, &config.noise, derive_seed(seed, "cls", 0));

    let ids: Vec<ClassId> = target.ids().collect();
    let dim = config.target_scene.dim();
    let mut student = PixelClassifier::zeros(ids.clone(), dim);
    let mut teacher = student.clone();

    let predefined = config.predefined();
    let open = open_classes(source, target, &predefined);
    let mut map = predefined.clone();
    let mut counts = CandidateCounts::empty((schedule.collect_start_step, schedule.relabel_start_step));
    let mut finalized = false;
    let mut warnings = Vec::new();
    let mut relabel = RelabelReport::default();

    let mut losses = Vec::new();
    let mut trajectory = Vec::new();
    let mut final_cm = None;

    for t in 0..config.total_steps {
        let src = &src_worlds[(t % src_worlds.len() as u64) as usize];
        let ti = (t % tgt_worlds.len() as u64) as usize;
        let tgt = &tgt_worlds[ti];
        let (mut pl, mut q) = pseudo_label(&teacher, tgt, config.tau)?;

        if config.csi {
            if schedule.is_collect_step(t) && !open.is_empty() {
                collect_image_votes(
                    &mut counts,
                    &pl,
                    &detections[ti],
                    &open,
                    &scorer,
                    &config.csi_params,
                    &config.automap,
                    source,
                    target,
                )?;
            }
            if schedule.is_relabel_step(t) && !finalized {
                let fin = finalize_map(&counts, source, target, &predefined)?;
                map = fin.map;
                warnings = fin.warnings;
                finalized = true;
            }
            let ctx = CsiContext { map: &map, taxonomy: target, params: &config.csi_params, schedule: &schedule };
            let (l, c, rep) = apply_csi(t, &pl, &q, &detections[ti], &scorer, &ctx)?;
            pl = l;
            q = c;
            relabel.merge(&rep);
        }

        let (ls, mut grad) = loss_and_grad(&student, src, &src.gt_labels, None)?;
        let (lt, gt) = loss_and_grad(&student, tgt, &pl, Some(&q))?;
        for (a, b) in grad.weights.iter_mut().zip(&gt.weights) {
            *a += b;
        }
        for (a, b) in grad.bias.iter_mut().zip(&gt.bias) {
            *a += b;
        }
        student.apply(&grad, config.learning_rate);
        teacher = ema_update(&teacher, &student, config.ema_alpha)?;
        if !student.is_finite() {
            return Err(SimError::Config(format!("training diverged at step {t}")));
        }

        let done = t + 1;
        if done % config.eval_every == 0 || done == config.total_steps {
            losses.push(LossPoint { step: done, source: ls.value, target: lt.value });
            let (mut point, cm) = evaluate(&student, &val_worlds, target, &split)?;
            point.step = done;
            trajectory.push(point);
            final_cm = Some(cm);
        }
    }

    let name = |c: ClassId| target.name_of(c).or_else(|| source.name_of(c)).unwrap_or("?").to_string();
    let specs = vec![
        ("mIoU".to_string(), MIoUSpec::over(ids.clone())),
        ("mIoU(common)".to_string(), MIoUSpec::over(split.common.clone())),
        ("mIoU(new)".to_string(), MIoUSpec::over(split.new.clone())),
    ];
    let final_metrics = MetricReport::build(final_cm.expect("total_steps > 0"), target, &specs);
    let automap_votes = counts
        .counts
        .iter()
        .flat_map(|(&to, m)| m.iter().map(move |(&from, &n)| (to, from, n)))
        .map(|(to, from, count)| VoteRecord { to: name(to), from: name(from), count })
        .collect();
    Ok(ExperimentReport {
        seed,
        csi: config.csi,
        total_steps: config.total_steps,
        relabel_start_step: config.relabel_start_step,
        classes: ids.iter().map(|&c| name(c)).collect(),
        common_classes: split.common.iter().map(|&c| name(c)).collect(),
        new_classes: split.new.iter().map(|&c| name(c)).collect(),
        losses,
        trajectory,
        final_metrics,
        relabel_map: map
            .entries()
            .iter()
            .map(|e| MapEntryRecord { from: name(e.from), to: name(e.to), origin: e.origin })
            .collect(),
        automap_votes,
        automap_warnings: warnings,
        relabel,
    })
}

/// Ready-made configurations over the `sim_source`/`sim_target` taxonomies.
pub mod presets {
    use super::*;
    use crate::sim::{ClassPrototype, ObjectSpec};

    pub const ROAD: ClassId = 0;
    pub const BUILDING: ClassId = 2;
    pub const VEGETATION: ClassId = 8;
    pub const TERRAIN: ClassId = 9;
    pub const SKY: ClassId = 10;
    pub const CAR: ClassId = 13;
    pub const TRUCK: ClassId = 14;
    pub const BUS: ClassId = 15;
    pub const TRAIN: ClassId = 16;

    const EPSILON: f64 = 1.2;

    fn prototypes() -> Vec<ClassPrototype> {
        let p = |class, v: [f64; 4]| ClassPrototype { class, prototype: v.to_vec() };
        vec![
            p(ROAD, [3.0, 0.0, 0.0, 0.0]),
            p(BUILDING, [-3.0, 0.0, 0.0, 0.0]),
            p(SKY, [0.0, 3.0, 0.0, 0.0]),
            p(VEGETATION, [0.0, -3.0, 0.0, 0.0]),
            p(TERRAIN, [0.0, -3.0, 0.0, EPSILON]),
            p(CAR, [0.0, 0.0, 3.0, 0.0]),
            p(TRUCK, [0.0, 0.0, 3.0, EPSILON]),
            p(BUS, [0.0, 0.0, -3.0, 0.0]),
            p(TRAIN, [0.0, 0.0, -3.0, EPSILON]),
        ]
    }

    fn obj(class: ClassId, count: [u32; 2], size: [u32; 2]) -> ObjectSpec {
        ObjectSpec { class, count, size }
    }

    pub fn source_scene() -> SceneConfig {
        SceneConfig {
            width: 64,
            height: 64,
            background: ROAD,
            objects: vec![
                obj(BUILDING, [1, 2], [8, 16]),
                obj(SKY, [1, 2], [8, 16]),
                obj(VEGETATION, [2, 3], [6, 12]),
                obj(CAR, [2, 4], [6, 9]),
                obj(BUS, [1, 3], [6, 10]),
            ],
            prototypes: prototypes(),
            noise_sigma: 0.25,
            shift: vec![0.0; 4],
            confusable: vec![[VEGETATION, TERRAIN], [CAR, TRUCK], [BUS, TRAIN]],
            confusable_epsilon: EPSILON,
            max_attempts: 500,
        }
    }

    pub fn target_scene() -> SceneConfig {
        SceneConfig {
            objects: vec![
                obj(BUILDING, [1, 2], [8, 14]),
                obj(SKY, [1, 2], [8, 14]),
                obj(VEGETATION, [1, 2], [6, 11]),
                obj(TERRAIN, [1, 2], [6, 11]),
                obj(CAR, [1, 3], [6, 9]),
                obj(TRUCK, [1, 2], [6, 9]),
                obj(BUS, [1, 2], [6, 9]),
                obj(TRAIN, [1, 2], [6, 9]),
            ],
            shift: vec![0.2, -0.2, 0.2, 0.0],
            ..source_scene()
        }
    }

    /// Three new classes: terrain and truck as fine splits of vegetation and
    /// car (predefined entries), train as an open class left to automap.
    pub fn mechanism(seed: u64, csi: bool) -> ExperimentConfig {
        let target = crate::presets::sim_target();
        let total_steps = 600;
        let schedule = RelabelSchedule::scaled(total_steps);
        ExperimentConfig {
            seed,
            total_steps,
            relabel_start_step: schedule.relabel_start_step,
            collect_start_step: schedule.collect_start_step,
            csi,
            learning_rate: 1.0,
            ema_alpha: 0.99,
            tau: 0.968,
            source_scene: source_scene(),
            target_scene: target_scene(),
            source_worlds: 8,
            target_worlds: 8,
            val_worlds: 4,
            noise: NoiseConfig::noiseless(),
            csi_params: CsiParams::cityscapes_defaults(&target),
            automap: AutoMapConfig::default(),
            predefined_map: vec![[VEGETATION, TERRAIN], [CAR, TRUCK]],
            eval_every: 50,
        }
    }

    /// Noisy detector: jittered boxes, uniform scores and spurious boxes
    /// over confusable objects at `false_positive_rate`. Runs longer and
    /// faster than `mechanism`: spurious relabels only cost accuracy once
    /// training is close to converged, before that they act as extra
    /// signal.
    pub fn noisy(seed: u64, false_positive_rate: f64, classifier_filter: bool) -> ExperimentConfig {
        let mut c = mechanism(seed, true);
        c.learning_rate = 2.0;
        c.total_steps = 2000;
        let schedule = RelabelSchedule::scaled(c.total_steps);
        c.relabel_start_step = schedule.relabel_start_step;
        c.collect_start_step = schedule.collect_start_step;
        c.eval_every = 200;
        c.noise = NoiseConfig {
            box_jitter_px: 1,
            false_positive_rate,
            true_score: [0.5, 1.0],
            false_score: [0.3, 0.9],
            ..NoiseConfig::noiseless()
        };
        c.csi_params.classifier_filter = classifier_filter;
        c
    }
}
