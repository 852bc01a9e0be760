//! Command-line front end: config parsing, staged pipeline with on-disk
//! caching, and the Markdown report.

pub mod config;
pub mod exit;
pub mod pipeline;
pub mod report;
