//! Open-vocabulary crop detection: class-name prompting, region scoring against
//! text embeddings, mask-quality fusion, contrastive image-caption alignment and
//! the metrics used to evaluate them.

pub mod backends;
pub mod data;
pub mod dssa;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod prompts;

pub use error::{Error, Result};
