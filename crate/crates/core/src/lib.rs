//! Person re-identification with multi-receptive-field attention masks,
//! camera-view supervision on the attention path, and a combined
//! softmax/triplet objective, built on a small reverse-mode tensor core.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod mrfa;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
