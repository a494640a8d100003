//! Dataset plumbing: synthetic data generation, directory ingestion with
//! label remapping, and checkpoint persistence.

pub mod checkpoint;
pub mod dataset;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{load_dataset_dir, DatasetManifest, DatasetMeta, Normalization, RemapTable};
pub use synthetic::generate_synthetic_dataset;

use crate::tensor::{LabelMap, Tensor};

/// One training/evaluation example: a standardized (1, 3, h, w) image and an
/// aligned (1, h, w) class-index map.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: LabelMap,
}
