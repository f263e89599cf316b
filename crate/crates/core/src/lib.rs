//! Subgraph retrieval over commonsense knowledge graphs: sampling,
//! graph/text alignment, a subgraph vector database and attention fusion
//! for multiple-choice question answering.

pub mod alignment;
pub mod benchmark;
pub mod config;
mod binio;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod kg;
pub mod optim;
pub mod pipeline;
pub mod query;
pub mod sampler;
pub mod textualize;
pub mod vectordb;

pub use error::{Error, Result};
pub use kg::KnowledgeGraph;
