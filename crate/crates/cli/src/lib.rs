//! Project layer of the vine water-deficit sensor: configuration, ingestion,
//! the artifact store, the stage pipeline and the candidate-review service.

pub mod config;
pub mod error;
pub mod fixture;
pub mod ingest;
pub mod pipeline;
pub mod service;
pub mod store;

pub use error::PipelineError;
pub use store::Project;
