//! Library surface of the experiment CLI: config schema, staged pipeline,
//! and report emission. The `synlab` binary is a thin wrapper.

pub mod config;
pub mod pipeline;
pub mod report;
