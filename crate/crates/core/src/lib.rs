//! Zero-shot relabeling of domain-adaptive segmentation pseudo-labels.
//!
//! A UDA teacher network produces pseudo-labels restricted to the source
//! taxonomy. Classes that exist only in the target taxonomy (a fine split of
//! a source class, or an entirely new class) are recovered by running an
//! open-vocabulary detector for those classes, verifying each detection with
//! a zero-shot classifier, and rewriting the pseudo-label inside every
//! verified box according to a From→To relabeling map.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`taxonomy`]: class label spaces, concept sets, relabeling maps and
//!   label-space conversion tables.
//! - [`raster`]: label/confidence rasters, boxes, the `CSIL`/`CSIF` file
//!   formats and connected components.
//! - [`detect`]: detection records, score thresholds, NMS and patch
//!   extraction.
//! - [`zsfilter`]: softmax-based zero-shot patch classification and the
//!   Map.From presence precheck.
//! - [`relabel`]: the per-image relabel step and its schedule.
//! - [`automap`]: auto-configuration of From→To entries for open classes.
//! - [`metrics`]: confusion matrices, per-class IoU, zero-filled mIoU.
//! - [`sim`]: synthetic worlds, simulated detector/classifier oracles and a
//!   small teacher/student self-training loop.

pub mod automap;
pub mod detect;
pub mod metrics;
pub mod palette;
pub mod presets;
pub mod raster;
pub mod relabel;
pub mod rng;
pub mod sim;
pub mod taxonomy;
pub mod zsfilter;

pub use automap::{AutoMapConfig, CandidateCounts};
pub use detect::{Detection, DetectorThresholds, Patch};
pub use metrics::{ConfusionMatrix, MIoUSpec};
pub use raster::{BBox, ConfidenceRaster, LabelRaster};
pub use relabel::{apply_csi, CsiContext, CsiParams, RelabelReport, RelabelSchedule};
pub use taxonomy::{ClassDef, ClassId, ConversionTable, RelabelMap, Taxonomy, IGNORE_ID};
pub use zsfilter::{ClassifierThresholds, ConceptScores};
