//! Measurement stack for masked-face biometrics: detection scoring, reference losses,
//! periocular and hybrid imaging, subject-disjoint splitting, and verification and
//! identification evaluation.

pub mod boxes;
pub mod detect;
pub mod embed;
pub mod image_io;
pub mod imaging;
pub mod losses;
pub mod manifest;
pub mod raster;
pub mod recog;
pub mod protocol;
pub mod reference;
pub mod report;
pub mod seed;
pub mod splits;
pub mod synth;

pub use boxes::{BBox, Detection, GroundTruth};
pub use embed::{EmbeddingVector, Embedder};
pub use manifest::{Manifest, ManifestEntry, MaskState, Spectrum};
pub use raster::Raster;
pub use recog::ConditionMatrix;
pub use splits::SplitPlan;

/// Toolkit version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
