//! Experiment directory: lock file, content-addressed checkpoints and JSON
//! manifests recording each command's inputs and output hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use owseg_core::network::Model;
use owseg_core::train::EpochStats;
use owseg_core::{ClassId, Stage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const LOCK_FILE: &str = "experiment.lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of `value`.
pub fn digest_of<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Holds the experiment lock until dropped.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Create the directory if needed and take the single-writer lock.
    pub fn open(root: &Path) -> Result<Store> {
        fs::create_dir_all(root)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", root.display())))?;
        let lock = root.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::usage(format!(
                    "experiment {} is locked by another process (remove {} if it is stale)",
                    root.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Store {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Write `bytes` to `rel` through a temporary file and return its hash.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(sha256_hex(bytes))
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        fs::read(self.path(rel)).map_err(|e| CliError::Io(format!("{rel}: {e}")))
    }

    /// Whether every listed output exists with the recorded hash.
    pub fn verify(&self, outputs: &BTreeMap<String, String>) -> bool {
        outputs
            .iter()
            .all(|(rel, hash)| fs::read(self.path(rel)).is_ok_and(|b| sha256_hex(&b) == *hash))
    }

    /// Store a model under the hash of its serialized form.
    pub fn put_checkpoint(&self, model: &Model) -> Result<(String, String)> {
        let bytes = serde_json::to_vec(model)?;
        let hash = sha256_hex(&bytes);
        let rel = format!("checkpoints/{hash}.json");
        if !self.verify(&BTreeMap::from([(rel.clone(), hash.clone())])) {
            self.write(&rel, &bytes)?;
        }
        Ok((rel, hash))
    }

    pub fn get_checkpoint(&self, hash: &str) -> Result<Model> {
        let rel = format!("checkpoints/{hash}.json");
        let bytes = self.read(&rel)?;
        if sha256_hex(&bytes) != hash {
            return Err(CliError::usage(format!("checkpoint {hash} is corrupted")));
        }
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn manifest_path(id: &str) -> String {
        format!("manifests/{id}.json")
    }

    pub fn load_manifest(&self, id: &str) -> Result<Option<Manifest>> {
        let path = self.path(&Self::manifest_path(id));
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path)?;
        Ok(Some(serde_json::from_slice(&bytes)?))
    }

    pub fn save_manifest(&self, manifest: &Manifest) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(manifest)?;
        self.write(&Self::manifest_path(&manifest.id), &bytes)?;
        Ok(())
    }

    /// All manifests that describe a model stage.
    pub fn stages(&self) -> Result<Vec<Manifest>> {
        let dir = self.path("manifests");
        let mut out = Vec::new();
        if !dir.exists() {
            return Ok(out);
        }
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        for p in names {
            if p.extension().is_some_and(|e| e == "json") {
                let m: Manifest = serde_json::from_slice(&fs::read(&p)?)?;
                if m.stage.is_some() {
                    out.push(m);
                }
            }
        }
        Ok(out)
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

/// How a post-IL stage was trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IlMethod {
    Real,
    Finetune,
    FeatureExtraction,
}

impl IlMethod {
    pub fn name(self) -> &'static str {
        match self {
            IlMethod::Real => "real",
            IlMethod::Finetune => "finetune",
            IlMethod::FeatureExtraction => "feature-extraction",
        }
    }
}

/// Record of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Position in the closed → OSeg → IL chain.
    pub sequence: usize,
    pub model_stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_checkpoint: Option<String>,
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promoted_class: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub il_method: Option<IlMethod>,
    /// Directory holding the merged pseudo labels the stage trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_labels: Option<String>,
    /// Unknown-score threshold calibrated on validation knowns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_th: Option<f64>,
    pub trace: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    pub command: String,
    /// Hash of `inputs`; a re-run with the same digest is a no-op.
    pub input_digest: String,
    pub inputs: serde_json::Value,
    /// Output files relative to the experiment root, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageRecord>,
}
