use serde::{Deserialize, Serialize};

use super::{SimError, SimWorld};
use crate::raster::{ConfidenceRaster, LabelRaster};
use crate::taxonomy::{ClassId, IGNORE_ID};

/// Per-pixel linear softmax: `p = softmax(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelClassifier {
    pub class_ids: Vec<ClassId>,
    pub dim: usize,
    /// Row-major `class_ids.len() × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Pixels entering the mean; 0 means the loss is a conventional 0.
    pub pixels: u64,
}

/// Class probabilities per pixel, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub width: u32,
    pub height: u32,
    pub class_ids: Vec<ClassId>,
    pub probs: Vec<f64>,
}

impl ProbMap {
    pub fn pixel(&self, index: usize) -> &[f64] {
        let c = self.class_ids.len();
        &self.probs[index * c..(index + 1) * c]
    }
}

fn class_lut(class_ids: &[ClassId]) -> [Option<usize>; 256] {
    let mut lut = [None; 256];
    for (i, &c) in class_ids.iter().enumerate() {
        lut[c as usize] = Some(i);
    }
    lut
}

fn softmax_into(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

impl PixelClassifier {
    pub fn zeros(class_ids: Vec<ClassId>, dim: usize) -> Self {
        let c = class_ids.len();
        PixelClassifier { class_ids, dim, weights: vec![0.0; c * dim], bias: vec![0.0; c] }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * self.dim..(k + 1) * self.dim];
            *o = self.bias[k] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn check_world(&self, world: &SimWorld) -> Result<(), SimError> {
        if world.dim != self.dim {
            return Err(SimError::Shape(format!("model dim {} vs world dim {}", self.dim, world.dim)));
        }
        Ok(())
    }

    pub fn predict(&self, world: &SimWorld) -> Result<ProbMap, SimError> {
        self.check_world(world)?;
        let c = self.num_classes();
        let n = world.gt_labels.len();
        let mut probs = vec![0.0; n * c];
        for i in 0..n {
            let out = &mut probs[i * c..(i + 1) * c];
            self.logits_into(world.feature(i), out);
            softmax_into(out);
        }
        Ok(ProbMap { width: world.width(), height: world.height(), class_ids: self.class_ids.clone(), probs })
    }

    /// Argmax labels; ties go to the earlier class in `class_ids`.
    pub fn predict_labels(&self, world: &SimWorld) -> Result<LabelRaster, SimError> {
        let probs = self.predict(world)?;
        Ok(argmax(&probs).0)
    }

    pub fn apply(&mut self, grad: &Gradient, learning_rate: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= learning_rate * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= learning_rate * g;
        }
    }

    fn same_shape(&self, other: &PixelClassifier) -> bool {
        self.class_ids == other.class_ids && self.dim == other.dim
    }
}

fn argmax(probs: &ProbMap) -> (LabelRaster, Vec<f64>) {
    let c = probs.class_ids.len();
    let n = probs.probs.len() / c;
    let mut labels = Vec::with_capacity(n);
    let mut maxes = Vec::with_capacity(n);
    for i in 0..n {
        let p = probs.pixel(i);
        let (k, &m) = p
            .iter()
            .enumerate()
            .fold((0, &p[0]), |best, (k, v)| if *v > *best.1 { (k, v) } else { best });
        labels.push(probs.class_ids[k]);
        maxes.push(m);
    }
    (LabelRaster::new(probs.width, probs.height, labels).expect("shape from probs"), maxes)
}

fn weighted_nll(
    probs: &ProbMap,
    labels: &LabelRaster,
    weight: impl Fn(usize) -> f64,
) -> Result<LossValue, SimError> {
    if (probs.width, probs.height) != (labels.width(), labels.height()) {
        return Err(SimError::Shape(format!(
            "probs {}x{} vs labels {}x{}",
            probs.width,
            probs.height,
            labels.width(),
            labels.height()
        )));
    }
    let lut = class_lut(&probs.class_ids);
    let mut sum = 0.0;
    let mut pixels = 0u64;
    for (i, &g) in labels.data().iter().enumerate() {
        if g == IGNORE_ID {
            continue;
        }
        let k = lut[g as usize].ok_or(SimError::UnknownClass(g))?;
        let p = probs.pixel(i)[k].max(f64::MIN_POSITIVE);
        sum -= weight(i) * p.ln();
        pixels += 1;
    }
    let value = if pixels == 0 { 0.0 } else { sum / pixels as f64 };
    Ok(LossValue { value, pixels })
}

/// Mean cross-entropy over labeled pixels.
pub fn source_loss(probs: &ProbMap, gt: &LabelRaster) -> Result<LossValue, SimError> {
    weighted_nll(probs, gt, |_| 1.0)
}

/// Mean of `-q log p` over pseudo-labeled pixels.
pub fn target_loss(probs: &ProbMap, pseudo: &LabelRaster, q: &ConfidenceRaster) -> Result<LossValue, SimError> {
    if (q.width(), q.height()) != (pseudo.width(), pseudo.height()) {
        return Err(SimError::Shape("confidence raster".into()));
    }
    weighted_nll(probs, pseudo, |i| q.data()[i] as f64)
}

/// Weighted cross-entropy and its gradient in one pass. `q = None` weighs
/// every pixel by 1.
pub fn loss_and_grad(
    model: &PixelClassifier,
    world: &SimWorld,
    labels: &LabelRaster,
    q: Option<&ConfidenceRaster>,
) -> Result<(LossValue, Gradient), SimError> {
    model.check_world(world)?;
    if !labels.same_shape(&world.gt_labels) {
        return Err(SimError::Shape("labels vs world".into()));
    }
    if let Some(q) = q {
        if !labels.same_shape(q) {
            return Err(SimError::Shape("confidence raster".into()));
        }
    }
    let (c, d) = (model.num_classes(), model.dim);
    let lut = class_lut(&model.class_ids);
    let mut gw = vec![0.0; c * d];
    let mut gb = vec![0.0; c];
    let mut p = vec![0.0; c];
    let mut sum = 0.0;
    let mut pixels = 0u64;
    for (i, &g) in labels.data().iter().enumerate() {
        if g == IGNORE_ID {
            continue;
        }
        let target = lut[g as usize].ok_or(SimError::UnknownClass(g))?;
        pixels += 1;
        let w = q.map_or(1.0, |q| q.data()[i] as f64);
        if w == 0.0 {
            continue;
        }
        let x = world.feature(i);
        model.logits_into(x, &mut p);
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + p.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        sum += w * (lse - p[target]);
        for k in 0..c {
            let delta = w * ((p[k] - lse).exp() - if k == target { 1.0 } else { 0.0 });
            gb[k] += delta;
            for (gwk, xv) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                *gwk += delta * xv;
            }
        }
    }
    if pixels > 0 {
        let n = pixels as f64;
        sum /= n;
        gw.iter_mut().chain(gb.iter_mut()).for_each(|v| *v /= n);
    }
    Ok((LossValue { value: sum, pixels }, Gradient { weights: gw, bias: gb }))
}

/// `φ' = α(φ − θ) + θ` for every parameter.
pub fn ema_update(teacher: &PixelClassifier, student: &PixelClassifier, alpha: f64) -> Result<PixelClassifier, SimError> {
    if !teacher.same_shape(student) {
        return Err(SimError::Shape("teacher and student differ".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SimError::Config(format!("ema alpha {alpha} outside [0, 1]")));
    }
    let mix = |phi: &[f64], theta: &[f64]| -> Vec<f64> {
        phi.iter().zip(theta).map(|(&f, &t)| alpha * (f - t) + t).collect()
    };
    Ok(PixelClassifier {
        class_ids: teacher.class_ids.clone(),
        dim: teacher.dim,
        weights: mix(&teacher.weights, &student.weights),
        bias: mix(&teacher.bias, &student.bias),
    })
}

/// Teacher argmax plus the image-level confidence: the fraction of pixels
/// whose top probability reaches `tau`, written to every pixel.
pub fn pseudo_label(
    teacher: &PixelClassifier,
    world: &SimWorld,
    tau: f64,
) -> Result<(LabelRaster, ConfidenceRaster), SimError> {
    let probs = teacher.predict(world)?;
    let (labels, maxes) = argmax(&probs);
    let confident = maxes.iter().filter(|&&m| m >= tau).count();
    let q = confident as f64 / maxes.len() as f64;
    let conf = ConfidenceRaster::filled(labels.width(), labels.height(), q as f32);
    Ok((labels, conf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_world(features: Vec<f64>, labels: Vec<ClassId>, dim: usize) -> SimWorld {
        let n = labels.len() as u32;
        SimWorld {
            image_id: "t".into(),
            gt_labels: LabelRaster::new(n, 1, labels).unwrap(),
            features,
            dim,
            placements: vec![],
            confusable: vec![],
            rng_seed: 0,
        }
    }

    fn uniform_probs(n: u32, c: usize) -> ProbMap {
        ProbMap {
            width: n,
            height: 1,
            class_ids: (0..c as u8).collect(),
            probs: vec![1.0 / c as f64; n as usize * c],
        }
    }

    #[test]
    fn uniform_loss_is_ln_c() {
        let gt = LabelRaster::new(3, 1, vec![0, 1, 3]).unwrap();
        let l = source_loss(&uniform_probs(3, 4), &gt).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        assert!((l.value - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn one_hot_loss_is_zero() {
        let probs = ProbMap { width: 2, height: 1, class_ids: vec![0, 1], probs: vec![1.0, 0.0, 0.0, 1.0] };
        let gt = LabelRaster::new(2, 1, vec![0, 1]).unwrap();
        assert_eq!(source_loss(&probs, &gt).unwrap().value, 0.0);
    }

    #[test]
    fn all_ignore_is_zero_pixels() {
        let gt = LabelRaster::filled(3, 1, IGNORE_ID);
        assert_eq!(source_loss(&uniform_probs(3, 4), &gt).unwrap(), LossValue { value: 0.0, pixels: 0 });
    }

    #[test]
    fn target_loss_rules() {
        let gt = LabelRaster::new(3, 1, vec![0, 1, 2]).unwrap();
        let probs = ProbMap {
            width: 3,
            height: 1,
            class_ids: vec![0, 1, 2],
            probs: vec![0.5, 0.25, 0.25, 0.1, 0.8, 0.1, 0.2, 0.2, 0.6],
        };
        let zero = ConfidenceRaster::filled(3, 1, 0.0);
        assert_eq!(target_loss(&probs, &gt, &zero).unwrap().value, 0.0);
        let one = ConfidenceRaster::filled(3, 1, 1.0);
        assert_eq!(target_loss(&probs, &gt, &one).unwrap().value, source_loss(&probs, &gt).unwrap().value);
        let half = ConfidenceRaster::filled(3, 1, 0.5);
        let a = target_loss(&probs, &gt, &half).unwrap().value;
        assert!((a - 0.5 * source_loss(&probs, &gt).unwrap().value).abs() < 1e-15);
        let bad = ConfidenceRaster::filled(2, 1, 0.5);
        assert!(target_loss(&probs, &gt, &bad).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let mut t = PixelClassifier::zeros(vec![0], 1);
        t.weights[0] = 1.0;
        let s = PixelClassifier::zeros(vec![0], 1);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.999).unwrap().weights[0], 0.999);
        assert!(ema_update(&t, &PixelClassifier::zeros(vec![0, 1], 1), 0.5).is_err());
    }

    #[test]
    fn dominant_bias_gives_constant_label() {
        let world = tiny_world(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.5], vec![0, 1, 2], 2);
        let mut m = PixelClassifier::zeros(vec![0, 1, 2], 2);
        m.bias[1] = 20.0;
        let (labels, q) = pseudo_label(&m, &world, 0.968).unwrap();
        assert!(labels.data().iter().all(|&v| v == 1));
        assert!(q.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_model_has_no_confidence() {
        let world = tiny_world(vec![1.0, 2.0], vec![0, 1], 1);
        let (labels, q) = pseudo_label(&PixelClassifier::zeros(vec![0, 1], 1), &world, 0.968).unwrap();
        assert_eq!(labels.data(), &[0, 0]);
        assert!(q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_loss_matches_source_loss() {
        let world = tiny_world(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.5], vec![0, 1, 2], 2);
        let mut m = PixelClassifier::zeros(vec![0, 1, 2], 2);
        m.weights = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
        let (l, _) = loss_and_grad(&m, &world, &world.gt_labels, None).unwrap();
        let direct = source_loss(&m.predict(&world).unwrap(), &world.gt_labels).unwrap();
        assert!((l.value - direct.value).abs() < 1e-12);
        let unknown = LabelRaster::new(3, 1, vec![0, 7, 1]).unwrap();
        assert_eq!(loss_and_grad(&m, &world, &unknown, None).unwrap_err(), SimError::UnknownClass(7));
    }
}
