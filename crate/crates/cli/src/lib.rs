//! Pipeline orchestration behind the `endd` command: configuration, data
//! generation, training, evaluation and result tables.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod tables;
