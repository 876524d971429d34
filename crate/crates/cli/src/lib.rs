//! Driver for the `ttct` binary: configuration loading, the five pipeline
//! commands and SVG plot emission.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
