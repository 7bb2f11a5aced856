//! Training objectives on assembled score vectors.
//!
//! All losses are per-point means of cross-entropy and return their gradient
//! with respect to the score matrix alongside the value. Column 0 of an
//! open-set or post-IL score matrix is the unknown class.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{assemble, scatter_assembled_grad, Model, Params, PointFeatures};
use crate::types::Stage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_syn: f64,
    pub lambda_cal: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_syn: 1.0,
            lambda_cal: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_syn >= 0.0 && self.lambda_cal >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Loss value with its gradient on the score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Stable `log softmax(row)[target]` and `softmax(row)`.
fn log_softmax_at(row: ArrayView1<f64>, target: usize) -> (f64, Vec<f64>) {
    let (k, mx) = crate::network::argmax(row.iter().copied()).expect("nonempty row");
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    // exps[k] == 1; ln_1p keeps precision when the other terms are tiny.
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != k)
        .map(|(_, e)| e)
        .sum();
    let z = 1.0 + rest;
    let probs = exps.iter().map(|e| e / z).collect();
    (row[target] - mx - rest.ln_1p(), probs)
}

pub fn softmax(row: ArrayView1<f64>) -> Vec<f64> {
    log_softmax_at(row, 0).1
}

/// Mean over non-void points of `-log softmax(score)[target]`.
pub fn cross_entropy(scores: ArrayView2<f64>, targets: &[Option<usize>]) -> Result<f64> {
    cross_entropy_with_grad(scores, targets).map(|o| o.value)
}

pub fn cross_entropy_with_grad(
    scores: ArrayView2<f64>,
    targets: &[Option<usize>],
) -> Result<LossOutput> {
    if targets.len() != scores.nrows() {
        return Err(Error::domain("target count does not match score rows"));
    }
    let d = scores.ncols();
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::domain(
            "cross-entropy needs at least one non-void point",
        ));
    }
    let mut grad = Array2::zeros(scores.raw_dim());
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= d {
            return Err(Error::domain(format!("target {t} outside [0, {d})")));
        }
        let (lp, probs) = log_softmax_at(scores.row(i), t);
        total -= lp;
        for (j, p) in probs.into_iter().enumerate() {
            grad[[i, j]] = p / count as f64;
        }
        grad[[i, t]] -= 1.0 / count as f64;
    }
    Ok(LossOutput {
        value: total / count as f64,
        grad,
    })
}

fn require_unknown_column(stage: Stage) -> Result<()> {
    if stage == Stage::Closed {
        Err(Error::domain("closed-stage scores have no unknown column"))
    } else {
        Ok(())
    }
}

/// Synthesis loss: cross-entropy of synthesized points toward the unknown
/// class. Zero (with zero gradient) when no point is synthesized.
pub fn loss_syn(scores: ArrayView2<f64>, stage: Stage, syn_mask: &[bool]) -> Result<LossOutput> {
    require_unknown_column(stage)?;
    if syn_mask.len() != scores.nrows() {
        return Err(Error::domain("syn mask does not match score rows"));
    }
    if !syn_mask.iter().any(|m| *m) {
        return Ok(LossOutput {
            value: 0.0,
            grad: Array2::zeros(scores.raw_dim()),
        });
    }
    let targets: Vec<Option<usize>> = syn_mask.iter().map(|&m| m.then_some(0)).collect();
    cross_entropy_with_grad(scores, &targets)
}

/// Calibration loss and its two terms.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationLoss {
    pub original: f64,
    pub unknown: f64,
    pub output: LossOutput,
}

/// `L_ori + lambda_cal * L_uk`.
///
/// `L_ori` is the cross-entropy against the labels. `L_uk` drops each
/// point's ground-truth column and asks the remaining vector to put its mass
/// on the unknown column. Points whose label is unknown (allowed only with
/// `allow_unknown_targets`, i.e. pseudo labels) contribute to `L_ori` only.
pub fn loss_cal(
    scores: ArrayView2<f64>,
    stage: Stage,
    targets: &[Option<usize>],
    lambda_cal: f64,
    allow_unknown_targets: bool,
) -> Result<CalibrationLoss> {
    require_unknown_column(stage)?;
    if !allow_unknown_targets && targets.contains(&Some(0)) {
        return Err(Error::domain(
            "unknown labels are only valid for pseudo-labeled incremental training",
        ));
    }
    let ori = cross_entropy_with_grad(scores, targets)?;
    let d = scores.ncols();
    let reduced_count = targets.iter().flatten().filter(|&&t| t != 0).count();
    let mut uk_value = 0.0;
    let mut grad = ori.grad.clone();
    if reduced_count > 0 {
        let scale = 1.0 / reduced_count as f64;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t == 0 {
                continue;
            }
            let cols: Vec<usize> = (0..d).filter(|&j| j != t).collect();
            let reduced = ndarray::Array1::from_iter(cols.iter().map(|&j| scores[[i, j]]));
            // Column 0 is never removed, so the unknown entry stays at position 0.
            let (lp, probs) = log_softmax_at(reduced.view(), 0);
            uk_value -= lp;
            for (k, &j) in cols.iter().enumerate() {
                let onehot = if k == 0 { 1.0 } else { 0.0 };
                grad[[i, j]] += lambda_cal * scale * (probs[k] - onehot);
            }
        }
        uk_value *= scale;
    }
    Ok(CalibrationLoss {
        original: ori.value,
        unknown: uk_value,
        output: LossOutput {
            value: ori.value + lambda_cal * uk_value,
            grad,
        },
    })
}

/// Per-term values of a combined objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cal_original: f64,
    pub cal_unknown: f64,
    pub cal: f64,
    pub syn: f64,
    pub total: f64,
}

/// Supervision for one scan, in assembled-column space.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBatch {
    /// Target column per point; `None` for void. Ignored on synthesized points.
    pub targets: Vec<Option<usize>>,
    /// Points of synthesized objects.
    pub syn_mask: Vec<bool>,
    /// Whether targets may name the unknown column (pseudo labels).
    pub allow_unknown_targets: bool,
}

/// Open-set or incremental objective: calibration on unchanged points plus
/// weighted synthesis loss on synthesized points.
pub fn loss_total(
    scores: ArrayView2<f64>,
    stage: Stage,
    batch: &LossBatch,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Array2<f64>)> {
    if batch.syn_mask.len() != batch.targets.len() {
        return Err(Error::domain("syn mask and targets differ in length"));
    }
    let nm_targets: Vec<Option<usize>> = batch
        .targets
        .iter()
        .zip(&batch.syn_mask)
        .map(|(t, &s)| if s { None } else { *t })
        .collect();
    let cal = if nm_targets.iter().all(Option::is_none) && batch.syn_mask.iter().any(|m| *m) {
        CalibrationLoss {
            original: 0.0,
            unknown: 0.0,
            output: LossOutput {
                value: 0.0,
                grad: Array2::zeros(scores.raw_dim()),
            },
        }
    } else {
        loss_cal(
            scores,
            stage,
            &nm_targets,
            cfg.lambda_cal,
            batch.allow_unknown_targets,
        )?
    };
    let syn = loss_syn(scores, stage, &batch.syn_mask)?;
    let mut grad = cal.output.grad;
    grad.scaled_add(cfg.lambda_syn, &syn.grad);
    let breakdown = LossBreakdown {
        cal_original: cal.original,
        cal_unknown: cal.unknown,
        cal: cal.output.value,
        syn: syn.value,
        total: cal.output.value + cfg.lambda_syn * syn.value,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }
    Ok((breakdown, grad))
}

/// Which loss a training step minimizes.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Plain cross-entropy over the normal classifiers (closed-set training).
    ClosedSet,
    /// Calibration plus synthesis on the stage's assembled scores.
    OpenWorld(LossConfig),
}

/// Loss value and full parameter gradient for one scan.
pub fn loss_and_gradients(
    model: &Model,
    features: PointFeatures,
    batch: &LossBatch,
    objective: &Objective,
    dropout: Option<&mut dyn RngCore>,
) -> Result<(LossBreakdown, Params)> {
    let (bundle, cache) = model.forward_features(features, dropout)?;
    let (breakdown, d_scores, assembled) = match objective {
        Objective::ClosedSet => {
            let assembled = assemble(&bundle, Stage::Closed)?;
            let out = cross_entropy_with_grad(assembled.scores.view(), &batch.targets)?;
            let b = LossBreakdown {
                cal_original: out.value,
                cal: out.value,
                total: out.value,
                ..Default::default()
            };
            (b, out.grad, assembled)
        }
        Objective::OpenWorld(cfg) => {
            let assembled = assemble(&bundle, model.stage)?;
            let (b, g) = loss_total(assembled.scores.view(), model.stage, batch, cfg)?;
            (b, g, assembled)
        }
    };
    let head_grad = if matches!(objective, Objective::ClosedSet) && model.stage != Stage::Closed {
        // Normal classifiers only; redundancy slots receive no gradient.
        crate::network::HeadGrad {
            d_old: d_scores,
            d_re: Array2::zeros((bundle.len(), model.num_slots())),
        }
    } else {
        scatter_assembled_grad(model, &assembled, &d_scores)
    };
    let grads = model.backward(&cache, &head_grad)?;
    Ok((breakdown, grads))
}

/// Loss value only, with dropout off. Used for finite-difference checks.
pub fn loss_value(
    model: &Model,
    features: PointFeatures,
    batch: &LossBatch,
    objective: &Objective,
) -> Result<f64> {
    let bundle = model.forward_features(features, None)?.0;
    match objective {
        Objective::ClosedSet => cross_entropy(bundle.y_old.view(), &batch.targets),
        Objective::OpenWorld(cfg) => {
            let scores = assemble(&bundle, model.stage)?.scores;
            Ok(loss_total(scores.view(), model.stage, batch, cfg)?.0.total)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_d() {
        let s = Array2::zeros((3, 4));
        let v = cross_entropy(s.view(), &[Some(0), Some(2), Some(3)]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits() {
        // -log(e^10 / (e^10 + e^-10)) = ln(1 + e^-20)
        let v = cross_entropy(array![[10.0, -10.0]].view(), &[Some(0)]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((v - expected).abs() < 1e-12 * expected);
        assert!((v - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn one_point_wrong_class() {
        let v = cross_entropy(array![[1.0, 0.0]].view(), &[Some(1)]).unwrap();
        let expected = (1.0 + 1f64.exp()).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn all_void_is_domain_error() {
        assert!(matches!(
            cross_entropy(array![[1.0, 0.0]].view(), &[None]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let v = cross_entropy(array![[1e4, -1e4, 0.0]].view(), &[Some(1)]).unwrap();
        assert!(v.is_finite());
        assert!((v - 2e4).abs() < 1e-6);
    }

    #[test]
    fn syn_loss_empty_and_dominant() {
        let s = array![[5.0, 0.0, 0.0]];
        let empty = loss_syn(s.view(), Stage::Open, &[false]).unwrap();
        assert_eq!(empty.value, 0.0);
        assert!(empty.grad.iter().all(|g| *g == 0.0));
        let v = loss_syn(s.view(), Stage::Open, &[true]).unwrap().value;
        let expected = (1.0 + 2.0 * (-5f64).exp()).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.0133).abs() < 1e-4);
        assert!(loss_syn(s.view(), Stage::Closed, &[true]).is_err());
    }

    #[test]
    fn syn_loss_monotone_in_unknown_logit() {
        let hi = loss_syn(array![[2.0, 1.0, 0.5]].view(), Stage::Open, &[true])
            .unwrap()
            .value;
        let lo = loss_syn(array![[1.0, 1.0, 0.5]].view(), Stage::Open, &[true])
            .unwrap()
            .value;
        assert!(lo > hi);
    }

    #[test]
    fn cal_without_weight_equals_original() {
        let s = array![[0.3, 2.0, -1.0], [1.0, 0.0, 0.5]];
        let t = [Some(1), Some(2)];
        let cal = loss_cal(s.view(), Stage::Open, &t, 0.0, false).unwrap();
        assert_eq!(cal.output.value, cross_entropy(s.view(), &t).unwrap());
    }

    #[test]
    fn cal_unknown_term_by_hand() {
        let (u, g, o) = (0.4, 1.7, -0.2);
        let s = array![[u, g, o]];
        let cal = loss_cal(s.view(), Stage::Open, &[Some(1)], 0.1, false).unwrap();
        // -log softmax((u, o))[0]
        let expected = -(u - (u.exp() + o.exp()).ln());
        assert!((cal.unknown - expected).abs() < 1e-12);
    }

    #[test]
    fn cal_rejects_unknown_targets_outside_il() {
        let s = array![[0.0, 1.0]];
        assert!(loss_cal(s.view(), Stage::Open, &[Some(0)], 0.1, false).is_err());
        let ok = loss_cal(s.view(), Stage::PostIl, &[Some(0)], 0.1, true).unwrap();
        assert_eq!(ok.unknown, 0.0);
    }

    #[test]
    fn calibration_orders_gt_then_unknown() {
        // Gradient descent on a single 3-logit point (unknown, gt, other).
        let mut x = array![[0.0, 0.0, 0.0]];
        for _ in 0..2000 {
            let cal = loss_cal(x.view(), Stage::Open, &[Some(1)], 0.1, false).unwrap();
            x.scaled_add(-0.5, &cal.output.grad);
        }
        let p = softmax(x.row(0));
        assert!(p[1] > p[0] && p[0] > p[2], "{p:?}");
    }

    #[test]
    fn total_is_linear_in_lambda_syn() {
        let s = array![[0.3, 2.0, -1.0], [1.0, 0.0, 0.5], [0.1, 0.2, 0.3]];
        let batch = LossBatch {
            targets: vec![Some(1), Some(2), Some(1)],
            syn_mask: vec![false, false, true],
            allow_unknown_targets: false,
        };
        let one = LossConfig {
            lambda_syn: 1.0,
            lambda_cal: 0.1,
        };
        let two = LossConfig {
            lambda_syn: 2.0,
            lambda_cal: 0.1,
        };
        let zero = LossConfig {
            lambda_syn: 0.0,
            lambda_cal: 0.1,
        };
        let (b1, _) = loss_total(s.view(), Stage::Open, &batch, &one).unwrap();
        let (b2, _) = loss_total(s.view(), Stage::Open, &batch, &two).unwrap();
        let (b0, _) = loss_total(s.view(), Stage::Open, &batch, &zero).unwrap();
        assert_eq!(b1.total, b1.cal + b1.syn);
        assert!((b2.total - b1.total - b1.syn).abs() < 1e-12);
        assert_eq!(b0.total, b0.cal);
        // Synthesized points are excluded from calibration.
        let cal_nm =
            loss_cal(s.view(), Stage::Open, &[Some(1), Some(2), None], 0.1, false).unwrap();
        assert_eq!(b1.cal, cal_nm.output.value);
    }

    #[test]
    fn total_with_empty_syn_equals_cal() {
        let s = array![[0.3, 2.0, -1.0]];
        let batch = LossBatch {
            targets: vec![Some(2)],
            syn_mask: vec![false],
            allow_unknown_targets: false,
        };
        let (b, _) = loss_total(
            s.view(),
            Stage::Open,
            &batch,
            &LossConfig {
                lambda_syn: 0.0,
                lambda_cal: 0.1,
            },
        )
        .unwrap();
        assert_eq!(b.total, b.cal);
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let s = array![
            [0.3, 2.0, -1.0, 0.2],
            [1.0, 0.0, 0.5, -0.7],
            [0.1, 0.2, 0.3, 0.4]
        ];
        let batch = LossBatch {
            targets: vec![Some(1), Some(0), Some(3)],
            syn_mask: vec![false, false, true],
            allow_unknown_targets: true,
        };
        let cfg = LossConfig::default();
        let (_, g) = loss_total(s.view(), Stage::PostIl, &batch, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut p = s.clone();
                p[[i, j]] += h;
                let mut m = s.clone();
                m[[i, j]] -= h;
                let fp = loss_total(p.view(), Stage::PostIl, &batch, &cfg)
                    .unwrap()
                    .0
                    .total;
                let fm = loss_total(m.view(), Stage::PostIl, &batch, &cfg)
                    .unwrap()
                    .0
                    .total;
                assert!(((fp - fm) / (2.0 * h) - g[[i, j]]).abs() < 1e-8);
            }
        }
    }
}
