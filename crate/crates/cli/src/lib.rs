//! Experiment orchestration for open-world LIDAR segmentation: dataset
//! generation, closed → open-set → incremental training, evaluation and
//! plot data, persisted in one experiment directory.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod store;
