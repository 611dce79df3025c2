pub mod data_pipeline;
pub mod entity_ingest;
pub mod error;
pub mod fixtures;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
