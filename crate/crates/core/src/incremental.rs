//! Incremental learning: one novel class is introduced per stage. Old-class
//! knowledge is retained by training on pseudo labels from the pre-stage
//! model merged with the ground truth of the new class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, Objective};
use crate::network::Model;
use crate::openset::{post_il_from_logits, predict_open, InferenceConfig};
use crate::synthesis::SynthesisConfig;
use crate::train::{
    derive_seed, train, EpochStats, ParamFilter, TrainConfig, TrainPlan, TrainSample,
};
use crate::types::{ClassId, LabelDomain, LabelSet, Scan, Stage, UNKNOWN_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ILStagePlan {
    pub promoted_class: ClassId,
    pub epochs: usize,
    /// Identifier of the checkpoint the stage starts from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_checkpoint: Option<String>,
}

impl ILStagePlan {
    pub fn new(promoted_class: ClassId) -> ILStagePlan {
        ILStagePlan {
            promoted_class,
            epochs: 5,
            source_checkpoint: None,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if !model
            .registry
            .remaining_novel()
            .contains(&self.promoted_class)
        {
            return Err(Error::domain(format!(
                "class {} is not a remaining novel class of the source model",
                self.promoted_class
            )));
        }
        if model.stage == Stage::Closed {
            return Err(Error::domain(
                "incremental learning starts from an open-set model",
            ));
        }
        Ok(())
    }
}

/// One training scan of an IL stage: only the promoted class is annotated.
#[derive(Clone, Debug, PartialEq)]
pub struct ILSample {
    pub scan: Scan,
    pub novel_gt: LabelSet,
}

/// Hyperparameters shared by an IL stage and its baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct ILSettings {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub synthesis: SynthesisConfig,
    /// Threshold used to produce pseudo labels.
    pub inference: InferenceConfig,
}

#[derive(Clone, Debug)]
pub struct ILOutcome {
    pub model: Model,
    /// Merged labels the stage trained on, one per sample.
    pub pseudo_labels: Vec<LabelSet>,
    pub trace: Vec<EpochStats>,
}

/// Merge novel ground truth with open-set pseudo labels from `model_o`.
/// Every point receives a label; ground truth takes precedence.
pub fn make_pseudo_labels(
    model_o: &Model,
    scan: &Scan,
    novel_gt: &LabelSet,
    cfg: &InferenceConfig,
) -> Result<LabelSet> {
    if novel_gt.len() != scan.len() {
        return Err(Error::domain("novel annotation does not match the scan"));
    }
    if let Some(l) = novel_gt
        .iter()
        .flatten()
        .find(|&l| l == UNKNOWN_ID || model_o.registry.is_known(l))
    {
        return Err(Error::domain(format!(
            "novel annotation contains class {l}, which the model already handles"
        )));
    }
    let pseudo = predict_open(model_o, scan, cfg)?;
    let labels = novel_gt
        .iter()
        .zip(pseudo.labels())
        .map(|(gt, &p)| gt.unwrap_or(p))
        .collect::<Vec<_>>();
    let m = labels.len();
    LabelSet::new(labels, vec![false; m], LabelDomain::PostIl)
}

fn seed_for(settings: &ILSettings, plan: &ILStagePlan) -> u64 {
    derive_seed(settings.train.seed, &[0x11, plan.promoted_class as u64])
}

/// Advance the registry and bind a redundancy slot to the promoted class.
pub fn promote(model_o: &Model, plan: &ILStagePlan, seed: u64) -> Result<Model> {
    plan.validate(model_o)?;
    let after = model_o.registry.advance(&[plan.promoted_class])?;
    model_o.reassign_rc(&after, seed)
}

fn stage_config(settings: &ILSettings, plan: &ILStagePlan) -> TrainConfig {
    TrainConfig {
        epochs: plan.epochs,
        seed: seed_for(settings, plan),
        ..settings.train.clone()
    }
}

/// Run one IL stage: pseudo labels from `model_o`, slot promotion, then
/// training with calibration and synthesis on the merged labels.
pub fn run_il_stage(
    model_o: &Model,
    plan: &ILStagePlan,
    data: &[ILSample],
    settings: &ILSettings,
) -> Result<ILOutcome> {
    plan.validate(model_o)?;
    let pseudo_labels = data
        .iter()
        .map(|s| make_pseudo_labels(model_o, &s.scan, &s.novel_gt, &settings.inference))
        .collect::<Result<Vec<_>>>()?;
    let model = promote(model_o, plan, seed_for(settings, plan))?;
    let samples: Vec<TrainSample> = data
        .iter()
        .zip(&pseudo_labels)
        .map(|(s, l)| TrainSample {
            scan: s.scan.clone(),
            labels: l.clone(),
        })
        .collect();
    let train_plan = TrainPlan {
        config: stage_config(settings, plan),
        objective: Objective::OpenWorld(settings.loss.clone()),
        synthesis: Some(settings.synthesis.clone()),
        allow_unknown_targets: true,
        filter: ParamFilter::All,
    };
    let (model, trace) = train(&model, &samples, &train_plan)?.into_result()?;
    Ok(ILOutcome {
        model,
        pseudo_labels,
        trace,
    })
}

fn baseline(
    model_o: &Model,
    plan: &ILStagePlan,
    data: &[ILSample],
    settings: &ILSettings,
    frozen_extractor: bool,
) -> Result<ILOutcome> {
    let model = promote(model_o, plan, seed_for(settings, plan))?;
    let samples: Vec<TrainSample> = data
        .iter()
        .map(|s| TrainSample {
            scan: s.scan.clone(),
            labels: s.novel_gt.single_class_view(plan.promoted_class),
        })
        .collect();
    let filter = if frozen_extractor {
        let slot = model
            .registry
            .rc_assigned()
            .iter()
            .find(|(_, &c)| c == plan.promoted_class)
            .map(|(&s, _)| s)
            .expect("promoted class has a slot");
        ParamFilter::RedundancyRows(vec![slot])
    } else {
        ParamFilter::All
    };
    let train_plan = TrainPlan {
        config: stage_config(settings, plan),
        objective: Objective::OpenWorld(settings.loss.clone()),
        synthesis: None,
        allow_unknown_targets: false,
        filter,
    };
    let (model, trace) = train(&model, &samples, &train_plan)?.into_result()?;
    Ok(ILOutcome {
        model,
        pseudo_labels: samples.into_iter().map(|s| s.labels).collect(),
        trace,
    })
}

/// Naive finetuning on the new class annotation alone.
pub fn baseline_finetune(
    model_o: &Model,
    plan: &ILStagePlan,
    data: &[ILSample],
    settings: &ILSettings,
) -> Result<ILOutcome> {
    baseline(model_o, plan, data, settings, false)
}

/// Train only the promoted class's classifier on the new class annotation;
/// every other parameter stays fixed.
pub fn baseline_feature_extraction(
    model_o: &Model,
    plan: &ILStagePlan,
    data: &[ILSample],
    settings: &ILSettings,
) -> Result<ILOutcome> {
    baseline(model_o, plan, data, settings, true)
}

/// Closed-set prediction after IL: argmax over old and learned novel classes.
pub fn predict_post_il(model: &Model, scan: &Scan) -> Result<LabelSet> {
    Ok(post_il_from_logits(
        &model.registry,
        &model.forward(scan, None)?,
    ))
}
