//! Analytical models, design-space exploration and functional references
//! for stage-customized LLM accelerators.

pub mod archgraph;
pub mod config;
pub mod dse;
pub mod error;
pub mod exact;
pub mod hmt;
pub mod kernels;
pub mod perf;
pub mod quant;
pub mod report;

pub use error::{Error, Result};
pub use exact::Exact;
