//! Desk-scale self-training harness.
//!
//! Scenes are rectangles of target classes whose pixels carry a small
//! feature vector (class prototype plus Gaussian noise). Confusable classes
//! sit close together in feature space, so a model trained only on the
//! source taxonomy folds the new classes into their neighbours. The
//! detector and classifier oracles read ground truth and can be degraded
//! through [`NoiseConfig`].

mod experiment;
mod model;
mod oracle;
mod scene;

use thiserror::Error;

use crate::automap::AutoMapError;
use crate::relabel::RelabelError;
use crate::taxonomy::{ClassId, TaxonomyError};

pub use experiment::{
    presets, run_experiment, EvalPoint, ExperimentConfig, ExperimentReport, LossPoint, MapEntryRecord,
};
pub use model::{
    ema_update, loss_and_grad, pseudo_label, source_loss, target_loss, Gradient, LossValue, PixelClassifier,
    ProbMap,
};
pub use oracle::{dominant_class, folded_pseudo_label, simulate_classifier, simulate_detector, NoiseConfig, SimScorer};
pub use scene::{generate_scene, ClassPrototype, ObjectSpec, Placement, SceneConfig, SimWorld};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("could not place object {index} of class {class} after {attempts} attempts")]
    Placement { class: ClassId, index: u32, attempts: u32 },
    #[error("invalid scene config: {0}")]
    Scene(String),
    #[error("invalid noise config: {0}")]
    Noise(String),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {0} is not an output of the model")]
    UnknownClass(ClassId),
    #[error(transparent)]
    Relabel(#[from] RelabelError),
    #[error(transparent)]
    AutoMap(#[from] AutoMapError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}
