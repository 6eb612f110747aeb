//! Command implementations behind the `anchorcap` binary.
//!
//! Artifacts land in three directories from the run configuration: the dataset in
//! `data_dir`, checkpoints and training logs in `checkpoint_dir`, and tables in
//! `output_dir`. Every table is also written as JSON lines carrying the seed.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod table;
