//! Mini-batch training with Adam, one scan per step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{loss_and_gradients, LossBatch, LossBreakdown, Objective};
use crate::network::{Model, Params};
use crate::synthesis::{apply_synthesis, SynthesisConfig};
use crate::types::{LabelSet, Scan, Stage, UNKNOWN_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay applied to every trainable entry.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Mix a base seed with a sequence of stream identifiers (SplitMix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| {
        mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(mix(p)))
    })
}

/// Which parameters an optimizer step may change.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamFilter {
    All,
    /// Only the listed rows (weights and bias) of the redundancy head.
    RedundancyRows(Vec<usize>),
}

impl ParamFilter {
    fn mask(&self, params: &Params) -> Vec<Option<Vec<bool>>> {
        params
            .tensors()
            .iter()
            .map(|(name, t)| match self {
                ParamFilter::All => None,
                ParamFilter::RedundancyRows(rows) => {
                    let mut m = vec![false; t.len()];
                    if name == "g_re.bias" {
                        for &r in rows {
                            m[r] = true;
                        }
                    } else if name == "g_re.weight" {
                        let width = params.hidden.outputs();
                        for &r in rows {
                            m[r * width..(r + 1) * width].fill(true);
                        }
                    }
                    Some(m)
                }
            })
            .collect()
    }
}

struct Adam {
    m: Params,
    v: Params,
    step: i32,
}

impl Adam {
    fn new(params: &Params) -> Adam {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut Params,
        grads: &Params,
        cfg: &TrainConfig,
        mask: &[Option<Vec<bool>>],
    ) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(mask);
        for ((((p, g), m), v), mask) in tensors {
            for k in 0..p.1.len() {
                if mask.as_ref().is_some_and(|mk| !mk[k]) {
                    continue;
                }
                let gk = g.1[k];
                m.1[k] = cfg.beta1 * m.1[k] + (1.0 - cfg.beta1) * gk;
                v.1[k] = cfg.beta2 * v.1[k] + (1.0 - cfg.beta2) * gk * gk;
                let mh = m.1[k] / c1;
                let vh = v.1[k] / c2;
                p.1[k] -= cfg.learning_rate
                    * (mh / (vh.sqrt() + cfg.epsilon) + cfg.weight_decay * p.1[k]);
            }
        }
    }
}

/// One training scan with its labels in class-id space.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub scan: Scan,
    pub labels: LabelSet,
}

/// Everything that defines a training run besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub config: TrainConfig,
    pub objective: Objective,
    /// Unknown-object synthesis applied to each scan before the step.
    pub synthesis: Option<SynthesisConfig>,
    /// Whether labels may be 0 (pseudo-labeled unknown points).
    pub allow_unknown_targets: bool,
    pub filter: ParamFilter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-step loss terms.
    pub loss: LossBreakdown,
    pub synthesized_instances: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final model, or the last model with finite loss when training diverged.
    pub model: Model,
    pub trace: Vec<EpochStats>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<(Model, Vec<EpochStats>)> {
        match self.diverged {
            Some(msg) => Err(Error::Numeric(msg)),
            None => Ok((self.model, self.trace)),
        }
    }
}

/// Map class ids to score columns for `objective`. Void labels, and labels
/// the model cannot represent, become `None`; the latter is an error.
pub fn targets_for(
    model: &Model,
    labels: &LabelSet,
    objective: &Objective,
    allow_unknown: bool,
) -> Result<Vec<Option<usize>>> {
    labels
        .iter()
        .map(|l| {
            let Some(l) = l else { return Ok(None) };
            let column = match objective {
                Objective::ClosedSet => model.registry.old_classes().iter().position(|&c| c == l),
                Objective::OpenWorld(_) => {
                    if l == UNKNOWN_ID && !allow_unknown {
                        None
                    } else {
                        model.registry.assembled_index(l)
                    }
                }
            };
            column.map(Some).ok_or_else(|| {
                Error::domain(format!(
                    "label {l} has no column in the {} model",
                    model.stage
                ))
            })
        })
        .collect()
}

/// Train `model` on `data`. Scans are visited in a seeded random order each
/// epoch; synthesis and dropout draw from per-scan streams derived from the
/// seed, so runs are reproducible.
pub fn train(model: &Model, data: &[TrainSample], plan: &TrainPlan) -> Result<TrainOutcome> {
    plan.config.validate()?;
    if let Some(s) = &plan.synthesis {
        s.validate()?;
        if model.stage == Stage::Closed {
            return Err(Error::domain(
                "synthesis needs a model with an unknown class",
            ));
        }
    }
    if let Objective::OpenWorld(cfg) = &plan.objective {
        cfg.validate()?;
    }
    if data.is_empty() && plan.config.epochs > 0 {
        return Err(Error::domain("training needs at least one scan"));
    }
    let mut model = model.clone();
    let features: Vec<_> = data.iter().map(|s| model.features(&s.scan)).collect();
    let targets = data
        .iter()
        .map(|s| {
            targets_for(
                &model,
                &s.labels,
                &plan.objective,
                plan.allow_unknown_targets,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = plan.filter.mask(&model.params);
    let mut adam = Adam::new(&model.params);
    let mut trace = Vec::with_capacity(plan.config.epochs);
    let seed = plan.config.seed;

    for epoch in 0..plan.config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[0, epoch as u64],
        )));
        let mut sum = LossBreakdown::default();
        let mut synthesized = 0;
        for &k in &order {
            let (feat, syn_mask) = match &plan.synthesis {
                Some(cfg) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.rng_seed ^ seed,
                        &[1, epoch as u64, k as u64],
                    ));
                    let out = apply_synthesis(
                        &data[k].scan,
                        &data[k].labels,
                        cfg,
                        &model.registry,
                        &mut rng,
                    )?;
                    synthesized += out.resized.len();
                    let feat = if out.resized.is_empty() {
                        features[k].clone()
                    } else {
                        model.features(&out.scan)
                    };
                    (feat, out.syn_mask)
                }
                None => (features[k].clone(), vec![false; data[k].scan.len()]),
            };
            let batch = LossBatch {
                targets: targets[k].clone(),
                syn_mask,
                allow_unknown_targets: plan.allow_unknown_targets,
            };
            if batch
                .targets
                .iter()
                .zip(&batch.syn_mask)
                .all(|(t, &s)| t.is_none() || s)
            {
                continue;
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, epoch as u64, k as u64]));
            let step = loss_and_gradients(&model, feat, &batch, &plan.objective, Some(&mut rng));
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    return Ok(TrainOutcome {
                        model,
                        trace,
                        diverged: Some(format!("epoch {epoch}: {msg}")),
                    })
                }
                Err(e) => return Err(e),
            };
            let before = model.params.clone();
            adam.update(&mut model.params, &grads, &plan.config, &mask);
            if !model.params.is_finite() {
                model.params = before;
                return Ok(TrainOutcome {
                    model,
                    trace,
                    diverged: Some(format!("epoch {epoch}: parameters became non-finite")),
                });
            }
            sum.cal_original += loss.cal_original;
            sum.cal_unknown += loss.cal_unknown;
            sum.cal += loss.cal;
            sum.syn += loss.syn;
            sum.total += loss.total;
        }
        let n = data.len() as f64;
        trace.push(EpochStats {
            epoch,
            loss: LossBreakdown {
                cal_original: sum.cal_original / n,
                cal_unknown: sum.cal_unknown / n,
                cal: sum.cal / n,
                syn: sum.syn / n,
                total: sum.total / n,
            },
            synthesized_instances: synthesized,
        });
    }
    Ok(TrainOutcome {
        model,
        trace,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model, ArchConfig};
    use crate::types::{ClassRegistry, LabelDomain};

    fn toy() -> (Model, Vec<TrainSample>) {
        let reg = ClassRegistry::new([1, 2], [3], 2).unwrap();
        let arch = ArchConfig {
            encoder_width: 4,
            hidden_width: 8,
            ..Default::default()
        };
        let model = init_model(&reg, &arch, Stage::Closed, 1).unwrap();
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|i| [i as f64 * 0.5, 0.0, (i % 2) as f64])
            .collect();
        let labels: Vec<u32> = (0..40).map(|i| 1 + (i % 2) as u32).collect();
        let scan = Scan::new(pts, None, vec![0; 40]).unwrap();
        let labels = LabelSet::new(labels, vec![false; 40], LabelDomain::ClosedOld).unwrap();
        (model, vec![TrainSample { scan, labels }])
    }

    fn plan(epochs: usize) -> TrainPlan {
        TrainPlan {
            config: TrainConfig {
                epochs,
                learning_rate: 0.05,
                ..Default::default()
            },
            objective: Objective::ClosedSet,
            synthesis: None,
            allow_unknown_targets: false,
            filter: ParamFilter::All,
        }
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let (model, data) = toy();
        let a = train(&model, &data, &plan(30)).unwrap();
        let b = train(&model, &data, &plan(30)).unwrap();
        assert!(a.diverged.is_none());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
        assert!(a.trace.last().unwrap().loss.total < 0.5 * a.trace[0].loss.total);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (model, data) = toy();
        let out = train(&model, &data, &plan(0)).unwrap();
        assert_eq!(out.model, model);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn filter_freezes_everything_else() {
        let (model, data) = toy();
        let open = model.with_redundancy_heads(2).unwrap();
        let mut p = plan(3);
        p.objective = Objective::OpenWorld(Default::default());
        p.filter = ParamFilter::RedundancyRows(vec![1]);
        let out = train(&open, &data, &p).unwrap();
        let (a, b) = (&open.params, &out.model.params);
        assert_eq!(a.enc1, b.enc1);
        assert_eq!(a.enc2, b.enc2);
        assert_eq!(a.hidden, b.hidden);
        assert_eq!(a.g_nm, b.g_nm);
        let (ra, rb) = (a.g_re.as_ref().unwrap(), b.g_re.as_ref().unwrap());
        assert_eq!(ra.weight.row(0), rb.weight.row(0));
        assert_ne!(ra.weight.row(1), rb.weight.row(1));
    }

    #[test]
    fn labels_outside_model_are_rejected() {
        let (model, mut data) = toy();
        data[0].labels = LabelSet::from_raw_ground_truth(vec![3; 40]);
        assert!(matches!(
            train(&model, &data, &plan(1)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, &[0, 0]), derive_seed(1, &[0, 1]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}
