//! Long-tailed classification with a shared pool of class-agnostic latent
//! category features, a reconstruction loss tying the pool to image features,
//! and closed-form semantic augmentation of the pool.

pub mod config;
pub mod diffcore;
pub mod error;
pub mod gradsuite;
pub mod latent_isda;
pub mod latent_pool;
pub mod longtail_data;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
