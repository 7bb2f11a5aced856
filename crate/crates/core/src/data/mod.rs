//! Scan and label ingestion plus the synthetic scene generator.

mod io;
mod synthetic;

pub use io::{
    read_labels, read_scan, write_labels, write_scan, LABEL_RECORD_BYTES, SCAN_RECORD_BYTES,
};
pub use synthetic::{
    generate_scene, split_of, GeneratedScene, SceneConfig, ShapeArchetype, ShapeKind, Split,
};
