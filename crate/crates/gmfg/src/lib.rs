//! Configuration, file formats, parallel execution and the `gmfg` command
//! line around the `gmfg-core` solvers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod exec;
pub mod manifest;
pub mod presets;
