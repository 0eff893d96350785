//! Command-line front end: configuration, synthetic images, and the
//! commands behind the `sepda` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod synth;
