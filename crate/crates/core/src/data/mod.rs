//! Dataset I/O, preprocessing and batching.

pub mod batches;
pub mod container;
pub mod manifest;
pub mod preprocess;
pub mod synth;

pub use batches::{make_batches, Batch, BatchOptions, SplitData};
pub use manifest::{Manifest, ManifestEntry, Modality};
