use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::raster::{BBox, LabelRaster};
use crate::rng;
use crate::taxonomy::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class: ClassId,
    pub prototype: Vec<f64>,
}

/// `count` and `size` are inclusive ranges; `size` bounds both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: ClassId,
    pub count: [u32; 2],
    pub size: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub background: ClassId,
    pub objects: Vec<ObjectSpec>,
    pub prototypes: Vec<ClassPrototype>,
    pub noise_sigma: f64,
    /// Added to every feature; models the domain gap.
    pub shift: Vec<f64>,
    /// Pairs whose prototypes must lie within `confusable_epsilon`.
    pub confusable: Vec<[ClassId; 2]>,
    pub confusable_epsilon: f64,
    pub max_attempts: u32,
}

impl SceneConfig {
    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn prototype(&self, class: ClassId) -> Option<&[f64]> {
        self.prototypes.iter().find(|p| p.class == class).map(|p| p.prototype.as_slice())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scene(m));
        if self.width == 0 || self.height == 0 {
            return bad("empty extent".into());
        }
        let d = self.dim();
        if d == 0 {
            return bad("feature dimension is zero".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        for p in &self.prototypes {
            if p.prototype.len() != d || p.prototype.iter().any(|v| !v.is_finite()) {
                return bad(format!("prototype of class {} must be {d} finite values", p.class));
            }
        }
        let classes = std::iter::once(self.background).chain(self.objects.iter().map(|o| o.class));
        for c in classes {
            if self.prototype(c).is_none() {
                return bad(format!("class {c} has no prototype"));
            }
        }
        for o in &self.objects {
            if o.count[0] > o.count[1] || o.size[0] == 0 || o.size[0] > o.size[1] {
                return bad(format!("bad ranges for class {}", o.class));
            }
        }
        for &[a, b] in &self.confusable {
            let (Some(pa), Some(pb)) = (self.prototype(a), self.prototype(b)) else {
                return bad(format!("confusable pair {a}/{b} lacks prototypes"));
            };
            let dist = pa.iter().zip(pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if dist > self.confusable_epsilon + 1e-12 {
                return bad(format!("confusable pair {a}/{b} is {dist:.3} apart"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub class: ClassId,
    pub bbox: BBox,
}

/// One synthetic image: labels in the target taxonomy and per-pixel
/// features stored pixel-major (`features[i * dim + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub image_id: String,
    pub gt_labels: LabelRaster,
    pub features: Vec<f64>,
    pub dim: usize,
    pub placements: Vec<Placement>,
    pub confusable: Vec<[ClassId; 2]>,
    pub rng_seed: u64,
}

impl SimWorld {
    pub fn width(&self) -> u32 {
        self.gt_labels.width()
    }

    pub fn height(&self) -> u32 {
        self.gt_labels.height()
    }

    pub fn feature(&self, index: usize) -> &[f64] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }

    /// Classes paired with `class` in the confusable list.
    pub fn confusable_with(&self, class: ClassId) -> Vec<ClassId> {
        self.confusable
            .iter()
            .filter_map(|&[a, b]| {
                if a == class {
                    Some(b)
                } else if b == class {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Places objects in config order by rejection sampling. Objects keep a
/// one-pixel background gap so each becomes its own connected component.
pub fn generate_scene(config: &SceneConfig, image_id: &str, seed: u64) -> Result<SimWorld, SimError> {
    config.validate()?;
    let mut rng = rng::stream(seed, "scene", 0);
    let (w, h) = (config.width, config.height);
    let mut labels = LabelRaster::filled(w, h, config.background);
    let mut placements: Vec<Placement> = Vec::new();

    for spec in &config.objects {
        let count = rng.random_range(spec.count[0]..=spec.count[1]);
        for index in 0..count {
            let mut placed = false;
            for _ in 0..config.max_attempts {
                let bw = rng.random_range(spec.size[0]..=spec.size[1]);
                let bh = rng.random_range(spec.size[0]..=spec.size[1]);
                if bw > w || bh > h {
                    continue;
                }
                let x = rng.random_range(0..=w - bw);
                let y = rng.random_range(0..=h - bh);
                let bbox = BBox::new(x, y, x + bw, y + bh).expect("non-empty box");
                let padded = BBox {
                    x_min: x.saturating_sub(1),
                    y_min: y.saturating_sub(1),
                    x_max: x + bw + 1,
                    y_max: y + bh + 1,
                };
                if placements.iter().any(|p| p.bbox.intersection(&padded).is_some()) {
                    continue;
                }
                for yy in bbox.y_min..bbox.y_max {
                    for xx in bbox.x_min..bbox.x_max {
                        labels.set(xx, yy, spec.class);
                    }
                }
                placements.push(Placement { class: spec.class, bbox });
                placed = true;
                break;
            }
            if !placed {
                return Err(SimError::Placement { class: spec.class, index, attempts: config.max_attempts });
            }
        }
    }

    let d = config.dim();
    let normal = Normal::new(0.0, config.noise_sigma).map_err(|e| SimError::Scene(e.to_string()))?;
    let mut features = Vec::with_capacity(labels.len() * d);
    for &c in labels.data() {
        let proto = config.prototype(c).expect("validated");
        for (p, s) in proto.iter().zip(&config.shift) {
            features.push(p + s + normal.sample(&mut rng));
        }
    }

    Ok(SimWorld {
        image_id: image_id.to_string(),
        gt_labels: labels,
        features,
        dim: d,
        placements,
        confusable: config.confusable.clone(),
        rng_seed: seed,
    })
}
