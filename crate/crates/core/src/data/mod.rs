//! Manifest loading, preprocessing, augmentation, splitting and batching.

pub mod batch;
pub mod image;
pub mod manifest;
pub mod split;
pub mod synth;

pub use batch::{batch_iter, Batch, BatchIter, BatchOptions, ManifestSource, MemorySource, SampleSource};
pub use image::{apply_flips, augment, load_image, preprocess, Flips, Normalization, DEFAULT_IMAGE_SIZE};
pub use manifest::{load_manifest, DatasetManifest, Record, CLASS_NAMES, NUM_CLASSES};
pub use split::stratified_split;
