//! Fine-grained image/text contrastive learning at desk scale.

pub mod dataset;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod nn;
pub mod simkernel;
pub mod textaug;
pub mod trainpipe;

pub use error::{Error, Result};
