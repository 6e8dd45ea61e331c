//! Run configuration: one TOML file shared by every subcommand. Relative
//! paths resolve against the directory holding the file. Taxonomies may
//! name a built-in preset as `preset:<name>`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use csi_core::automap::AutoMapConfig;
use csi_core::detect::DetectorThresholds;
use csi_core::presets;
use csi_core::relabel::{CsiParams, RelabelSchedule};
use csi_core::sim::{self, ExperimentConfig, NoiseConfig};
use csi_core::taxonomy::{load_taxonomy, validate_map, RelabelMap, Taxonomy};
use csi_core::zsfilter::ClassifierThresholds;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub taxonomy: TaxonomySection,
    pub schedule: Option<ScheduleSection>,
    pub thresholds: Option<ThresholdSection>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub automap: AutomapSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub gen: GenSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySection {
    pub source: String,
    pub target: String,
    /// Relabeling map document (`[[entry]] from/to`).
    pub map: Option<String>,
}

impl Default for TaxonomySection {
    fn default() -> Self {
        TaxonomySection { source: "preset:sim_source".into(), target: "preset:sim_target".into(), map: None }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub relabel_start_step: u64,
    pub collect_start_step: u64,
    pub total_steps: u64,
}

/// Thresholds keyed by class name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    #[serde(default = "default_detector")]
    pub detector_default: f64,
    #[serde(default = "default_nms")]
    pub nms_iou: f64,
    #[serde(default)]
    pub detector: BTreeMap<String, f64>,
    #[serde(default = "default_classifier")]
    pub classifier_default: f64,
    #[serde(default)]
    pub classifier: BTreeMap<String, f64>,
    #[serde(default = "yes")]
    pub classifier_filter: bool,
    #[serde(default = "one")]
    pub relabel_confidence: f32,
}

fn default_detector() -> f64 {
    0.1
}
fn default_nms() -> f64 {
    0.3
}
fn default_classifier() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}
fn one() -> f32 {
    1.0
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub gt: Option<String>,
    pub pseudo: Option<String>,
    pub pred: Option<String>,
    pub detections: Option<String>,
    pub classifications: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutomapSection {
    pub area_fraction_threshold: Option<f64>,
    /// Counts checkpoints merged before finalizing.
    #[serde(default)]
    pub merge: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Classes averaged; all target classes when absent.
    pub classes: Option<Vec<String>>,
    /// Classes counted as IoU 0 in an extra zero-filled mean.
    #[serde(default)]
    pub zero_fill: Vec<String>,
}

/// Overrides on top of a simulation preset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub preset: Option<String>,
    pub total_steps: Option<u64>,
    /// Relabel start as a fraction of `total_steps`.
    pub relabel_start: Option<f64>,
    pub learning_rate: Option<f64>,
    pub ema_alpha: Option<f64>,
    pub tau: Option<f64>,
    pub eval_every: Option<u64>,
    pub source_worlds: Option<usize>,
    pub target_worlds: Option<usize>,
    pub val_worlds: Option<usize>,
    pub box_jitter_px: Option<u32>,
    pub false_positive_rate: Option<f64>,
    pub classifier_correct_prob: Option<f64>,
    pub classifier_filter: Option<bool>,
    pub relabel_confidence: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub worlds: usize,
    pub box_jitter_px: u32,
    pub false_positive_rate: f64,
    pub classifier_correct_prob: f64,
    /// Confidence written to the generated pseudo-labels.
    pub pseudo_confidence: f32,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            worlds: 8,
            box_jitter_px: 0,
            false_positive_rate: 0.0,
            classifier_correct_prob: 1.0,
            pseudo_confidence: 0.9,
        }
    }
}

/// A parsed config plus the directory its relative paths hang off.
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

pub fn load(path: Option<&Path>) -> Result<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded { config: RunConfig::default(), base: PathBuf::from(".") });
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = Loaded { config, base };
    loaded.check_files()?;
    Ok(loaded)
}

fn preset_document(name: &str) -> Option<&'static str> {
    Some(match name {
        "cityscapes" => presets::CITYSCAPES,
        "synthia" => presets::SYNTHIA,
        "sim_source" => presets::SIM_SOURCE,
        "sim_target" => presets::SIM_TARGET,
        _ => return None,
    })
}

impl Loaded {
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn check_files(&self) -> Result<()> {
        let t = &self.config.taxonomy;
        let d = &self.config.data;
        let files = [Some(&t.source), Some(&t.target), t.map.as_ref(), d.detections.as_ref(), d.classifications.as_ref()];
        for f in files.into_iter().flatten().filter(|f| !f.starts_with("preset:")) {
            let p = self.resolve(f);
            if !p.is_file() {
                bail!("config references missing file {}", p.display());
            }
        }
        for f in &self.config.automap.merge {
            let p = self.resolve(f);
            if !p.is_file() {
                bail!("config references missing file {}", p.display());
            }
        }
        for dir in [&d.gt, &d.pseudo, &d.pred].into_iter().flatten() {
            let p = self.resolve(dir);
            if !p.is_dir() {
                bail!("config references missing directory {}", p.display());
            }
        }
        if let Some(s) = self.config.schedule {
            RelabelSchedule::new(s.relabel_start_step, s.collect_start_step, s.total_steps)?;
        }
        Ok(())
    }

    fn taxonomy(&self, spec: &str) -> Result<Taxonomy> {
        if let Some(name) = spec.strip_prefix("preset:") {
            let doc = preset_document(name).with_context(|| format!("unknown taxonomy preset {name:?}"))?;
            return Ok(load_taxonomy(doc)?);
        }
        let p = self.resolve(spec);
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        load_taxonomy(&text).with_context(|| format!("in {}", p.display()))
    }

    pub fn source(&self) -> Result<Taxonomy> {
        self.taxonomy(&self.config.taxonomy.source)
    }

    pub fn target(&self) -> Result<Taxonomy> {
        self.taxonomy(&self.config.taxonomy.target)
    }

    /// The configured map, validated; empty when none is configured.
    pub fn map(&self, source: &Taxonomy, target: &Taxonomy) -> Result<RelabelMap> {
        let Some(m) = &self.config.taxonomy.map else {
            return Ok(RelabelMap::default());
        };
        let p = self.resolve(m);
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let map = RelabelMap::from_document(&text, source, target).with_context(|| format!("in {}", p.display()))?;
        if let Err(v) = validate_map(&map, source, target) {
            bail!("{}: invalid map: {:?}", p.display(), v);
        }
        Ok(map)
    }

    pub fn schedule(&self) -> RelabelSchedule {
        self.config
            .schedule
            .map(|s| RelabelSchedule {
                relabel_start_step: s.relabel_start_step,
                collect_start_step: s.collect_start_step,
                total_steps: s.total_steps,
            })
            .unwrap_or_default()
    }

    /// Table defaults for the target taxonomy unless thresholds are given.
    pub fn csi_params(&self, target: &Taxonomy) -> Result<CsiParams> {
        let Some(t) = &self.config.thresholds else {
            return Ok(CsiParams::cityscapes_defaults(target));
        };
        let mut detector = DetectorThresholds { default: t.detector_default, nms_iou: t.nms_iou, ..Default::default() };
        for (name, &v) in &t.detector {
            detector.per_class.insert(target.id_of(name)?, v);
        }
        detector.validate().map_err(anyhow::Error::msg)?;
        let mut classifier = ClassifierThresholds { default: t.classifier_default, ..Default::default() };
        for (name, &v) in &t.classifier {
            classifier.per_class.insert(target.id_of(name)?, v);
        }
        Ok(CsiParams {
            detector,
            classifier,
            relabel_confidence: t.relabel_confidence,
            classifier_filter: t.classifier_filter,
        })
    }

    pub fn automap(&self) -> AutoMapConfig {
        let mut c = AutoMapConfig::default();
        if let Some(v) = self.config.automap.area_fraction_threshold {
            c.area_fraction_threshold = v;
        }
        c
    }

    pub fn experiment(&self, seed: Option<u64>, csi: Option<bool>) -> Result<ExperimentConfig> {
        let e = &self.config.experiment;
        let seed = seed.unwrap_or(0);
        let mut c = match e.preset.as_deref().unwrap_or("mechanism") {
            "mechanism" => sim::presets::mechanism(seed, true),
            "noisy" => sim::presets::noisy(seed, 0.3, true),
            other => bail!("unknown experiment preset {other:?}"),
        };
        if let Some(v) = e.total_steps {
            let fraction = c.relabel_start_step as f64 / c.total_steps as f64;
            let window = (c.relabel_start_step - c.collect_start_step) as f64 / c.total_steps as f64;
            c.total_steps = v;
            c.relabel_start_step = (v as f64 * fraction).round() as u64;
            c.collect_start_step = c.relabel_start_step - (v as f64 * window).round() as u64;
        }
        if let Some(f) = e.relabel_start {
            c = c.with_relabel_start(f);
        }
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = e.$field { c.$field = v; })* };
        }
        set!(learning_rate, ema_alpha, tau, eval_every, source_worlds, target_worlds, val_worlds);
        if let Some(v) = e.box_jitter_px {
            c.noise.box_jitter_px = v;
        }
        if let Some(v) = e.false_positive_rate {
            c.noise.false_positive_rate = v;
        }
        if let Some(v) = e.classifier_correct_prob {
            c.noise.classifier_correct_prob = v;
        }
        if let Some(v) = e.classifier_filter {
            c.csi_params.classifier_filter = v;
        }
        if let Some(v) = e.relabel_confidence {
            c.csi_params.relabel_confidence = v;
        }
        if let Some(v) = csi {
            c.csi = v;
        }
        Ok(c)
    }

    pub fn gen_noise(&self) -> NoiseConfig {
        let g = &self.config.gen;
        NoiseConfig {
            box_jitter_px: g.box_jitter_px,
            false_positive_rate: g.false_positive_rate,
            classifier_correct_prob: g.classifier_correct_prob,
            ..NoiseConfig::noiseless()
        }
    }
}
