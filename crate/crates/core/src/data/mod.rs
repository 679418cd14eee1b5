//! Synthetic data, image and manifest I/O, checkpoints.

pub mod checkpoint;
pub mod io;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use io::{generate_dataset, load_dataset, ManifestRecord, PairImages, Split};
pub use synth::{crop_patches, generate_pair, PatchTriple, PhotometricJitter, ScenePair, ScenePairSpec};
