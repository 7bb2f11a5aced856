//! Open-world semantic segmentation for LIDAR point clouds.
//!
//! A closed-set segmentation model is extended with redundancy classifiers
//! that score an unknown class, trained with resized pseudo-unknown objects
//! and a calibration loss, and later grown to new classes with pseudo labels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod incremental;
pub mod losses;
pub mod network;
pub mod openset;
pub mod synthesis;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    ClassId, ClassRegistry, LabelDomain, LabelSet, LogitsBundle, Scan, Stage, UNKNOWN_ID,
};
