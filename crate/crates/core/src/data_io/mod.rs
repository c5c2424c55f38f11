//! Manifests, image decoding and encoding, and checkpoint persistence.

mod checkpoint;
mod color;
mod manifest;

pub use checkpoint::{
    latest_checkpoint, load_checkpoint, rng_from_state, rng_state, save_checkpoint, stage_dir, CheckpointMeta,
    OptimizerState, RngState, CHECKPOINT_FILE, FORMAT_VERSION,
};
pub use color::{
    load_image, load_pair, rgb_to_ycbcr, write_fused, write_gray, ycbcr_to_rgb, Chroma, ChromaSource, LoadedImage,
    SamplePair,
};
pub use manifest::{DatasetManifest, ManifestEntry, Modality, Split};
