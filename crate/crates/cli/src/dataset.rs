//! Datasets on disk in SemanticKITTI layout: one `.bin` scan and one
//! `.label` file per frame.

use std::fs;
use std::path::{Path, PathBuf};

use owseg_core::data::{
    generate_scene, read_labels, read_scan, split_of, write_labels, write_scan, SceneConfig, Split,
};
use owseg_core::train::derive_seed;
use owseg_core::{ClassRegistry, LabelDomain, LabelSet, Scan};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ExperimentConfig, Stream};
use crate::error::{CliError, Result};
use crate::store::{sha256_hex, Store};

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
    }
}

/// One frame with its complete ground truth (unregistered classes void).
#[derive(Clone, Debug)]
pub struct Frame {
    pub name: String,
    pub scan: Scan,
    pub labels: LabelSet,
}

/// Files that make up a split, relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFiles {
    pub name: String,
    pub scan: PathBuf,
    pub labels: PathBuf,
}

/// Seed of synthetic scene `index`; its parity encodes the split.
pub fn scene_seed(cfg: &ExperimentConfig, split: Split, index: usize) -> u64 {
    let h = derive_seed(cfg.seed_for(Stream::Data), &[index as u64]);
    let seed = (h << 1) | matches!(split, Split::Val) as u64;
    debug_assert_eq!(split_of(seed), split);
    seed
}

/// Write the synthetic scenes under `data/<split>/` and return the written
/// files with their hashes.
pub fn generate(store: &Store, cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let DatasetConfig::Synthetic {
        scene,
        train_scenes,
        val_scenes,
    } = &cfg.dataset
    else {
        return Err(CliError::usage(
            "gen-data generates synthetic datasets only",
        ));
    };
    let registry = cfg.closed_registry()?;
    let mut written = Vec::new();
    for (split, count) in [(Split::Train, *train_scenes), (Split::Val, *val_scenes)] {
        for i in 0..count {
            let scene_cfg = SceneConfig {
                rng_seed: scene_seed(cfg, split, i),
                ..scene.clone()
            };
            let g = generate_scene(&scene_cfg, &registry)?;
            let base = format!("data/{}/{i:06}", split_name(split));
            let scan_rel = format!("{base}.bin");
            let label_rel = format!("{base}.label");
            let h1 = store.write(&scan_rel, &write_scan(&g.scan))?;
            let h2 = store.write(
                &label_rel,
                &write_labels(&g.full_labels, g.scan.instance_ids())?,
            )?;
            written.push((scan_rel, h1));
            written.push((label_rel, h2));
        }
    }
    Ok(written)
}

/// Frames of a split as file pairs, in name order.
pub fn list_frames(store: &Store, cfg: &ExperimentConfig, split: Split) -> Result<Vec<FrameFiles>> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            train_scenes,
            val_scenes,
            ..
        } => {
            let count = match split {
                Split::Train => *train_scenes,
                Split::Val => *val_scenes,
            };
            Ok((0..count)
                .map(|i| {
                    let base = store.path(&format!("data/{}/{i:06}", split_name(split)));
                    FrameFiles {
                        name: format!("{}/{i:06}", split_name(split)),
                        scan: base.with_extension("bin"),
                        labels: base.with_extension("label"),
                    }
                })
                .collect())
        }
        DatasetConfig::SemanticKitti {
            root,
            train_sequences,
            val_sequences,
            max_scans_per_sequence,
        } => {
            let seqs = match split {
                Split::Train => train_sequences,
                Split::Val => val_sequences,
            };
            let mut out = Vec::new();
            for seq in seqs {
                out.extend(kitti_sequence(root, seq, *max_scans_per_sequence)?);
            }
            Ok(out)
        }
    }
}

fn kitti_sequence(root: &Path, seq: &str, limit: Option<usize>) -> Result<Vec<FrameFiles>> {
    let dir = root.join("sequences").join(seq);
    let velodyne = dir.join("velodyne");
    let mut stems: Vec<String> = fs::read_dir(&velodyne)
        .map_err(|e| CliError::usage(format!("cannot list {}: {e}", velodyne.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "bin" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    if let Some(n) = limit {
        stems.truncate(n);
    }
    Ok(stems
        .into_iter()
        .map(|s| FrameFiles {
            name: format!("{seq}/{s}"),
            scan: velodyne.join(format!("{s}.bin")),
            labels: dir.join("labels").join(format!("{s}.label")),
        })
        .collect())
}

/// Read a frame. Ground-truth classes outside the registry become void.
pub fn load_frame(files: &FrameFiles, registry: &ClassRegistry) -> Result<Frame> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))
    };
    let scan = read_scan(&read(&files.scan)?)?;
    let (labels, instances) = read_labels(&read(&files.labels)?, scan.len())?;
    let scan = scan.with_instance_ids(instances)?;
    let labels = labels.restrict(LabelDomain::GroundTruth, |l| registry.is_registered(l));
    Ok(Frame {
        name: files.name.clone(),
        scan,
        labels,
    })
}

pub fn load_split(store: &Store, cfg: &ExperimentConfig, split: Split) -> Result<Vec<Frame>> {
    let registry = cfg.closed_registry()?;
    list_frames(store, cfg, split)?
        .iter()
        .map(|f| load_frame(f, &registry))
        .collect()
}

/// Hash every file of both splits.
pub fn fingerprint(store: &Store, cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val] {
        for f in list_frames(store, cfg, split)? {
            for p in [&f.scan, &f.labels] {
                let bytes = fs::read(p)
                    .map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
                out.push((p.display().to_string(), sha256_hex(&bytes)));
            }
        }
    }
    Ok(out)
}
