//! Image files, dataset manifests and the procedural toy dataset.

pub mod manifest;
pub mod ppm;
pub mod shapescenes;

pub use manifest::{batch_indices, epoch_order, load_batch, Dataset, DatasetManifest, SPLITS};
pub use ppm::{load_image, save_image};
