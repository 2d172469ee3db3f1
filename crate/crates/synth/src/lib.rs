//! Synthetic referring-segmentation data: scenes of coloured shapes with
//! exact masks and templated expressions in three dialects (absolute
//! position words allowed, appearance only, relational phrases).

pub mod baseline;
pub mod dataset;
pub mod error;
pub mod expression;
pub mod render;
pub mod resolver;
pub mod scene;
pub mod vocab;

pub use baseline::{mask_iou, random_object_miou};
pub use dataset::{
    generate_dataset, generate_sample, read_dataset, read_manifest, write_dataset, Dataset,
    DatasetConfig, DatasetManifest, SampleRecord, Split,
};
pub use error::{Result, SynthError};
pub use expression::{emit_expression, Dialect, Expression};
pub use render::render;
pub use resolver::resolve;
pub use scene::{generate_scene, Color, Object, SceneSpec, Shape, Size, SynthConfig};
