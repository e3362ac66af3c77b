//! Dataset ingestion, cross-validated training runs, quality reports and
//! the `thermvis` command line, on top of `thermvis-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fsutil;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod tensors;
pub mod weights;

pub use config::{load_config, RunConfig};
pub use error::{Error, Result};
pub use thermvis_core as core;
