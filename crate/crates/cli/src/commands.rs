use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use csi_core::automap::{collect_image_votes, finalize_map, merge_counts, open_classes, CandidateCounts};
use csi_core::detect::{parse_detections, write_detections, write_patch_manifest, Detection, Patch};
use csi_core::metrics::{ConfusionMatrix, MIoUSpec, MetricReport};
use csi_core::relabel::{apply_csi, candidate_patches, CsiContext, RelabelReport};
use csi_core::rng::derive_seed;
use csi_core::sim::{folded_pseudo_label, generate_scene, run_experiment, simulate_classifier, simulate_detector, SimWorld};
use csi_core::taxonomy::{ClassId, Taxonomy};
use csi_core::zsfilter::{parse_classifications, write_classifications, ConceptScores};
use csi_core::{ConfidenceRaster, LabelRaster};

use crate::config::{self, Loaded};
use crate::dataset::{self, confidence_path, label_path};
use crate::{palette, Common, Switch};

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn required(loaded: &Loaded, field: &Option<String>, name: &str) -> Result<PathBuf> {
    let v = field.as_ref().with_context(|| format!("config needs data.{name}"))?;
    Ok(loaded.resolve(v))
}

struct Generated {
    world: SimWorld,
    pseudo: LabelRaster,
    dets: Vec<Detection>,
    scores: Vec<ConceptScores>,
}

pub fn gen(c: &Common) -> Result<()> {
    let loaded = config::load(c.config.as_deref())?;
    let (source, target) = (loaded.source()?, loaded.target()?);
    let seed = c.seed.unwrap_or(0);
    let exp = loaded.experiment(Some(seed), None)?;
    exp.validate(&source, &target)?;
    let noise = loaded.gen_noise();
    let params = loaded.csi_params(&target)?;
    let new: Vec<ClassId> = target.ids().filter(|c| !source.contains(*c)).collect();
    let gen_cfg = &loaded.config.gen;

    let one = |i: usize| -> Result<Generated> {
        let id = format!("img-{i:04}");
        let world = generate_scene(&exp.target_scene, &id, derive_seed(seed, "gen", i as u64))?;
        let pseudo = folded_pseudo_label(&world, &source);
        let mut dets = Vec::new();
        for &class in &new {
            dets.extend(simulate_detector(&world, class, &target, &noise, derive_seed(seed, "gen-det", i as u64))?);
        }
        let scores = candidate_patches(&pseudo, &dets, &params.detector)?
            .iter()
            .map(|p| simulate_classifier(p, &world, &target, &noise, derive_seed(seed, &p.patch_id, 0)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Generated { world, pseudo, dets, scores })
    };
    let items: Vec<Generated> =
        dataset::pool(c.workers)?.install(|| (0..gen_cfg.worlds).into_par_iter().map(one).collect::<Result<_>>())?;

    let out = &c.out;
    let mut all_dets = Vec::new();
    let mut all_scores = Vec::new();
    for g in &items {
        let id = &g.world.image_id;
        dataset::write_label(&label_path(&out.join("gt"), id), &g.world.gt_labels)?;
        dataset::write_label(&label_path(&out.join("pseudo"), id), &g.pseudo)?;
        let conf = ConfidenceRaster::filled(g.pseudo.width(), g.pseudo.height(), gen_cfg.pseudo_confidence);
        dataset::write_conf(&confidence_path(&out.join("pseudo"), id), &conf)?;
        all_dets.extend(g.dets.iter().cloned());
        all_scores.extend(g.scores.iter().cloned());
    }
    dataset::write(&out.join("detections.jsonl"), write_detections(&all_dets, &target).as_bytes())?;
    dataset::write(&out.join("classifications.jsonl"), write_classifications(&all_scores).as_bytes())?;
    dataset::write(&out.join("source_taxonomy.toml"), source.to_document().as_bytes())?;
    dataset::write(&out.join("target_taxonomy.toml"), target.to_document().as_bytes())?;
    dataset::write(&out.join("map.toml"), exp.predefined().to_document(&source, &target).as_bytes())?;
    let run = "[taxonomy]\nsource = \"source_taxonomy.toml\"\ntarget = \"target_taxonomy.toml\"\nmap = \"map.toml\"\n\n\
               [data]\ngt = \"gt\"\npseudo = \"pseudo\"\ndetections = \"detections.jsonl\"\n\
               classifications = \"classifications.jsonl\"\n";
    dataset::write(&out.join("run.toml"), run.as_bytes())?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        seed: u64,
        images: Vec<&'a str>,
        detections: usize,
        classifications: usize,
    }
    let manifest = Manifest {
        seed,
        images: items.iter().map(|g| g.world.image_id.as_str()).collect(),
        detections: all_dets.len(),
        classifications: all_scores.len(),
    };
    dataset::write(&out.join("manifest.json"), json(&manifest).as_bytes())?;
    println!("wrote {} images to {}", items.len(), out.display());
    Ok(())
}

pub fn train(c: &Common) -> Result<()> {
    let loaded = config::load(c.config.as_deref())?;
    let (source, target) = (loaded.source()?, loaded.target()?);
    let exp = loaded.experiment(c.seed, c.csi.map(|s| s == Switch::On))?;
    let report = run_experiment(&exp, &source, &target)?;
    dataset::write(&c.out.join("report.json"), report.to_json().as_bytes())?;
    print!("{}", report.final_metrics.to_table());
    for e in &report.relabel_map {
        println!("map {} -> {} ({:?})", e.from, e.to, e.origin);
    }
    for w in &report.automap_warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Detections grouped by image, in file order.
fn detections_by_image(loaded: &Loaded, target: &Taxonomy) -> Result<BTreeMap<String, Vec<Detection>>> {
    let Some(path) = &loaded.config.data.detections else {
        return Ok(BTreeMap::new());
    };
    let path = loaded.resolve(path);
    let dets = parse_detections(&dataset::read_text(&path)?, target).with_context(|| format!("in {}", path.display()))?;
    let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id.clone()).or_default().push(d);
    }
    Ok(by_image)
}

fn classifications(loaded: &Loaded) -> Result<HashMap<String, ConceptScores>> {
    let Some(path) = &loaded.config.data.classifications else {
        return Ok(HashMap::new());
    };
    let path = loaded.resolve(path);
    let records = parse_classifications(&dataset::read_text(&path)?).with_context(|| format!("in {}", path.display()))?;
    Ok(records.into_iter().map(|r| (r.patch_id.clone(), r)).collect())
}

pub fn relabel(c: &Common, step: u64, input: Option<PathBuf>, manifest: bool) -> Result<()> {
    let loaded = config::load(c.config.as_deref())?;
    let (source, target) = (loaded.source()?, loaded.target()?);
    let map = loaded.map(&source, &target)?;
    if map.is_empty() {
        bail!("relabel needs a relabeling map (taxonomy.map)");
    }
    let params = loaded.csi_params(&target)?;
    let enabled = c.csi != Some(Switch::Off);
    let schedule = loaded.schedule();
    let input = match input {
        Some(p) => p,
        None => required(&loaded, &loaded.config.data.pseudo, "pseudo")?,
    };
    let dets = detections_by_image(&loaded, &target)?;
    let scores = classifications(&loaded)?;
    let ctx = CsiContext { map: &map, taxonomy: &target, params: &params, schedule: &schedule };
    let ids = dataset::image_ids(&input)?;

    let one = |id: &String| -> Result<(RelabelReport, Vec<Patch>)> {
        let label = dataset::read_label(&label_path(&input, id))?;
        let conf = dataset::read_confidence_opt(&confidence_path(&input, id))?;
        let had_conf = conf.is_some();
        let conf = conf.unwrap_or_else(|| ConfidenceRaster::filled(label.width(), label.height(), 1.0));
        let image_dets = dets.get(id).map_or(&[][..], Vec::as_slice);
        let (out_label, out_conf, report) = if enabled {
            apply_csi(step, &label, &conf, image_dets, &scores, &ctx).with_context(|| format!("image {id}"))?
        } else {
            (label.clone(), conf, RelabelReport::default())
        };
        dataset::write_label(&label_path(&c.out, id), &out_label)?;
        if had_conf {
            dataset::write_conf(&confidence_path(&c.out, id), &out_conf)?;
        }
        let patches = if manifest { candidate_patches(&label, image_dets, &params.detector)? } else { Vec::new() };
        Ok((report, patches))
    };
    let results: Vec<(RelabelReport, Vec<Patch>)> =
        dataset::pool(c.workers)?.install(|| ids.par_iter().map(one).collect::<Result<_>>())?;

    let mut total = RelabelReport::default();
    let mut patches = Vec::new();
    for (r, p) in results {
        total.merge(&r);
        patches.extend(p);
    }
    std::fs::create_dir_all(&c.out)?;
    dataset::write(&c.out.join("relabel_report.json"), json(&total).as_bytes())?;
    if manifest {
        dataset::write(&c.out.join("patches.jsonl"), write_patch_manifest(&patches, &target).as_bytes())?;
    }
    print!("{}", total.to_text(&target));
    Ok(())
}

pub fn automap(c: &Common) -> Result<()> {
    let loaded = config::load(c.config.as_deref())?;
    let (source, target) = (loaded.source()?, loaded.target()?);
    let predefined = loaded.map(&source, &target)?;
    let params = loaded.csi_params(&target)?;
    let auto = loaded.automap();
    let schedule = loaded.schedule();
    let window = (schedule.collect_start_step, schedule.relabel_start_step);
    let open = open_classes(&source, &target, &predefined);
    let input = required(&loaded, &loaded.config.data.pseudo, "pseudo")?;
    let dets = detections_by_image(&loaded, &target)?;
    let scores = classifications(&loaded)?;
    let ids = dataset::image_ids(&input)?;

    let one = |id: &String| -> Result<CandidateCounts> {
        let label = dataset::read_label(&label_path(&input, id))?;
        let mut counts = CandidateCounts::empty(window);
        let image_dets = dets.get(id).map_or(&[][..], Vec::as_slice);
        collect_image_votes(&mut counts, &label, image_dets, &open, &scores, &params, &auto, &source, &target)
            .with_context(|| format!("image {id}"))?;
        Ok(counts)
    };
    let per_image: Vec<CandidateCounts> =
        dataset::pool(c.workers)?.install(|| ids.par_iter().map(one).collect::<Result<_>>())?;
    let mut counts = CandidateCounts::empty(window);
    for p in &per_image {
        counts = merge_counts(&counts, p)?;
    }
    for m in &loaded.config.automap.merge {
        let path = loaded.resolve(m);
        let other = CandidateCounts::from_json(&dataset::read_text(&path)?, &source, &target)
            .with_context(|| format!("in {}", path.display()))?;
        counts = merge_counts(&counts, &other)?;
    }
    let fin = finalize_map(&counts, &source, &target, &predefined)?;
    dataset::write(&c.out.join("counts.json"), counts.to_json(&source, &target).as_bytes())?;
    dataset::write(&c.out.join("map.toml"), fin.map.to_document(&source, &target).as_bytes())?;
    for w in &fin.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", fin.map);
    Ok(())
}

pub fn eval(c: &Common, pred: Option<PathBuf>, gt: Option<PathBuf>) -> Result<()> {
    let loaded = config::load(c.config.as_deref())?;
    let target = loaded.target()?;
    let pred = match pred {
        Some(p) => p,
        None => required(&loaded, &loaded.config.data.pred, "pred")?,
    };
    let gt = match gt {
        Some(p) => p,
        None => required(&loaded, &loaded.config.data.gt, "gt")?,
    };
    let ids = dataset::image_ids(&gt)?;
    if ids.is_empty() {
        bail!("no .csil files in {}", gt.display());
    }
    let span = target.id_span();
    let one = |id: &String| -> Result<ConfusionMatrix> {
        let g = dataset::read_label(&label_path(&gt, id))?;
        let p = dataset::read_label(&label_path(&pred, id))?;
        let mut cm = ConfusionMatrix::new(span);
        cm.accumulate(&p, &g).with_context(|| format!("image {id}"))?;
        Ok(cm)
    };
    let per_image: Vec<ConfusionMatrix> =
        dataset::pool(c.workers)?.install(|| ids.par_iter().map(one).collect::<Result<_>>())?;
    let mut cm = ConfusionMatrix::new(span);
    for m in &per_image {
        cm.merge(m)?;
    }

    let ids_of = |names: &[String]| -> Result<Vec<ClassId>> {
        names.iter().map(|n| target.id_of(n).map_err(anyhow::Error::from)).collect()
    };
    let classes = match &loaded.config.eval.classes {
        Some(names) => ids_of(names)?,
        None => target.ids().collect(),
    };
    let zero_fill = ids_of(&loaded.config.eval.zero_fill)?;
    let mut specs = vec![("mIoU".to_string(), MIoUSpec::over(classes.clone()))];
    if !zero_fill.is_empty() {
        let subset = classes.iter().copied().filter(|c| !zero_fill.contains(c)).collect();
        specs.push(("mIoU(zero-filled)".to_string(), MIoUSpec { class_subset: subset, zero_fill }));
    }
    let report = MetricReport::build(cm, &target, &specs);
    dataset::write(&c.out.join("metrics.json"), json(&report).as_bytes())?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn render(c: &Common, input: &Path) -> Result<()> {
    let ids = dataset::image_ids(input)?;
    let one = |id: &String| -> Result<()> {
        let r = dataset::read_label(&label_path(input, id))?;
        dataset::write(&c.out.join(format!("{id}.ppm")), &palette::to_ppm(&r))
    };
    dataset::pool(c.workers)?.install(|| ids.par_iter().map(one).collect::<Result<Vec<()>>>())?;
    println!("rendered {} rasters to {}", ids.len(), c.out.display());
    Ok(())
}
