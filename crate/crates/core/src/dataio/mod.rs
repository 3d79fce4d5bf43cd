//! Feature files, synthetic data, batching and checkpoints.

mod batch;
mod checkpoint;
pub mod container;
mod dataset;
mod synthetic;

pub use batch::{batch_iter, Batch};
pub use checkpoint::{load_checkpoint_into, read_checkpoint, save_checkpoint};
pub use dataset::{
    load_dataset, read_manifest, save_dataset, BoundingBox, CaptionFeatures, CaptionRecord,
    Dataset, DatasetManifest, ImageFeatures, ImageRecord, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use synthetic::{
    gen_synthetic, generate, read_planted, Planted, SyntheticDataset, SyntheticSpec, PLANTED_FILE,
};
