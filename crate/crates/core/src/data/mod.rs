//! Dataset ingestion, synthetic data, sampling and augmentation.

pub mod augment;
pub mod manifest;
pub mod ppm;
pub mod sampler;
pub mod synth;

pub use augment::{augment_chain, hda_augment, AugmentConfig, HdaConfig};
pub use manifest::{load_manifest, Dataset, LabeledImage};
pub use sampler::{pk_sample, BatchSpec};
pub use synth::synth_generate;
