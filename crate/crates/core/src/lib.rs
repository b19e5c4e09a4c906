//! Point-view fusion network for 3D shape recognition.
//!
//! A graph-attention point branch and a weight-shared multi-view CNN branch
//! produce per-shape features. The global point feature scores every view,
//! the resulting soft mask reweights the views, and the pooled result is
//! concatenated with the point feature for classification and retrieval.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gap;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod multiview;
pub mod params;
pub mod pointcloud;
pub mod tensor;
pub mod train;

pub use data::{DatasetManifest, ManifestEntry, Primitive, Split, SyntheticShapeSpec};
pub use error::{Error, Result};
pub use eval::{ClassificationReport, Metric, RetrievalReport};
pub use fusion::{FusionMask, MaskMode, ProjectedPointFeatures, ShapeDescriptor};
pub use gap::{AttentionCoefficients, PointGlobalFeature};
pub use model::{Branch, Manet, ModelConfig};
pub use multiview::{ViewFeatureSet, ViewImage, ViewSet};
pub use params::ParamStore;
pub use pointcloud::{EdgeTensor, KnnGraph, PointCloud, TriangleMesh};
pub use tensor::Tensor;
pub use train::{Checkpoint, Dataset, Stage, TrainConfig};
