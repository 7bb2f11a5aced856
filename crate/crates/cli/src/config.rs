//! Experiment configuration: one JSON document covering data, model,
//! training and inference.

use std::path::{Path, PathBuf};

use owseg_core::data::SceneConfig;
use owseg_core::losses::LossConfig;
use owseg_core::network::ArchConfig;
use owseg_core::openset::InferenceConfig;
use owseg_core::synthesis::SynthesisConfig;
use owseg_core::train::{derive_seed, TrainConfig};
use owseg_core::{ClassId, ClassRegistry};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable that overrides `output_dir`.
pub const ROOT_ENV: &str = "OWSEG_EXPERIMENT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed of every random stream in the experiment.
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub registry: RegistryConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("experiment")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Scenes drawn from the parametric generator and stored in SemanticKITTI layout.
    Synthetic {
        #[serde(default)]
        scene: SceneConfig,
        train_scenes: usize,
        val_scenes: usize,
    },
    /// An existing SemanticKITTI tree (`sequences/<id>/velodyne`, `sequences/<id>/labels`).
    SemanticKitti {
        root: PathBuf,
        train_sequences: Vec<String>,
        val_sequences: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_scans_per_sequence: Option<usize>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            scene: SceneConfig::default(),
            train_scenes: 48,
            val_scenes: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryConfig {
    /// Redundancy classifiers r.
    pub redundancy: usize,
    /// Old classes K_0. Taken from the scene for synthetic data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub old_classes: Option<Vec<ClassId>>,
    /// Withheld classes. Taken from the scene for synthetic data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novel_classes: Option<Vec<ClassId>>,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            redundancy: 3,
            old_classes: None,
            novel_classes: None,
        }
    }
}

/// Optimizer settings of one training stage. The seed is derived from the
/// experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl StageTraining {
    fn new(epochs: usize, learning_rate: f64) -> Self {
        StageTraining {
            epochs,
            learning_rate,
            weight_decay: 0.0,
        }
    }
}

impl Default for StageTraining {
    fn default() -> Self {
        StageTraining::new(10, 0.01)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub closed: StageTraining,
    pub oseg: StageTraining,
    pub il_epochs: usize,
    /// IL learning rate as a multiple of the OSeg learning rate.
    pub il_lr_scale: f64,
    /// Learning rate of the finetune and feature-extraction baselines as a
    /// multiple of the OSeg learning rate.
    pub baseline_lr_scale: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            closed: StageTraining::new(20, 0.01),
            oseg: StageTraining::new(40, 0.003),
            il_epochs: 50,
            il_lr_scale: 0.1,
            baseline_lr_scale: 100.0,
        }
    }
}

/// Stream identifiers mixed into the experiment seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    ClosedInit,
    ClosedTrain,
    OsegHeads,
    OsegTrain,
    OsegSynthesis,
    Il(ClassId),
    Data,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.synthesis.validate()?;
        self.loss.validate()?;
        self.inference.validate()?;
        for (name, t) in [
            ("closed", &self.training.closed),
            ("oseg", &self.training.oseg),
        ] {
            self.train_config(t, 0)
                .validate()
                .map_err(|e| CliError::usage(format!("training.{name}: {e}")))?;
        }
        for (name, v) in [
            ("il_lr_scale", self.training.il_lr_scale),
            ("baseline_lr_scale", self.training.baseline_lr_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::usage(format!("training.{name} must be positive")));
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                scene,
                train_scenes,
                val_scenes,
            } => {
                scene.validate()?;
                if *train_scenes == 0 || *val_scenes == 0 {
                    return Err(CliError::usage(
                        "synthetic dataset needs train and val scenes",
                    ));
                }
                let implied = (scene.old_class_ids(), scene.novel_class_ids());
                if let Some(old) = &self.registry.old_classes {
                    if *old != implied.0 {
                        return Err(CliError::usage(
                            "registry.old_classes disagrees with the scene",
                        ));
                    }
                }
                if let Some(novel) = &self.registry.novel_classes {
                    if *novel != implied.1 {
                        return Err(CliError::usage(
                            "registry.novel_classes disagrees with the scene",
                        ));
                    }
                }
            }
            DatasetConfig::SemanticKitti {
                train_sequences,
                val_sequences,
                ..
            } => {
                if self.registry.old_classes.is_none() || self.registry.novel_classes.is_none() {
                    return Err(CliError::usage(
                        "a SemanticKITTI dataset needs registry.old_classes and registry.novel_classes",
                    ));
                }
                if train_sequences.is_empty() || val_sequences.is_empty() {
                    return Err(CliError::usage("train and val sequences must be non-empty"));
                }
            }
        }
        self.closed_registry()?;
        Ok(())
    }

    /// Registry of the closed-set model.
    pub fn closed_registry(&self) -> Result<ClassRegistry> {
        let (old, novel) = match &self.dataset {
            DatasetConfig::Synthetic { scene, .. } => {
                (scene.old_class_ids(), scene.novel_class_ids())
            }
            DatasetConfig::SemanticKitti { .. } => (
                self.registry.old_classes.clone().unwrap_or_default(),
                self.registry.novel_classes.clone().unwrap_or_default(),
            ),
        };
        Ok(ClassRegistry::new(old, novel, self.registry.redundancy)?)
    }

    pub fn seed_for(&self, stream: Stream) -> u64 {
        let parts: Vec<u64> = match stream {
            Stream::ClosedInit => vec![1],
            Stream::ClosedTrain => vec![2],
            Stream::OsegHeads => vec![3],
            Stream::OsegTrain => vec![4],
            Stream::OsegSynthesis => vec![5],
            Stream::Il(c) => vec![6, c as u64],
            Stream::Data => vec![7],
        };
        derive_seed(self.seed, &parts)
    }

    pub fn train_config(&self, stage: &StageTraining, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: stage.epochs,
            learning_rate: stage.learning_rate,
            weight_decay: stage.weight_decay,
            seed,
            ..Default::default()
        }
    }

    /// Experiment directory: the environment override, else `output_dir`.
    pub fn root(&self) -> PathBuf {
        match std::env::var_os(ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.registry.redundancy, 3);
        assert_eq!(cfg.loss, LossConfig::default());
        assert_eq!(cfg.training.il_lr_scale, 0.1);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(serde_json::from_str::<ExperimentConfig>("{}").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seed": 1, "sed": 2}"#).is_err());
    }

    #[test]
    fn kitti_needs_class_lists() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"seed": 1, "dataset": {"kind": "semantic_kitti", "root": "/data", "train_sequences": ["00"], "val_sequences": ["08"]}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));
    }

    #[test]
    fn streams_are_distinct() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        let seeds = [
            cfg.seed_for(Stream::ClosedInit),
            cfg.seed_for(Stream::ClosedTrain),
            cfg.seed_for(Stream::OsegHeads),
            cfg.seed_for(Stream::OsegTrain),
            cfg.seed_for(Stream::Il(5)),
            cfg.seed_for(Stream::Il(6)),
        ];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
