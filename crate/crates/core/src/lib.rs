pub mod data;
pub mod embeddings;
pub mod error;
pub mod experiment;
pub mod fofe;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
