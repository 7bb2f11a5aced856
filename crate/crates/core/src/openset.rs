//! Open-set inference: unknown scores, closed and open predictions, and the
//! uncertainty baselines used for comparison.
//!
//! Every unknown score is oriented so that a higher value means "more likely
//! unknown".

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::network::{argmax, Model};
use crate::types::{ClassRegistry, LabelDomain, LabelSet, LogitsBundle, Scan, Stage, UNKNOWN_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMethod {
    /// Maximum over the unknown-dedicated redundancy classifiers.
    Real,
    /// One minus the maximum softmax probability.
    Msp,
    /// Negated maximum logit.
    MaxLogit,
    /// Predictive entropy of the mean softmax over dropout passes.
    McDropout,
}

impl ScoringMethod {
    pub const ALL: [ScoringMethod; 4] = [
        ScoringMethod::Real,
        ScoringMethod::Msp,
        ScoringMethod::MaxLogit,
        ScoringMethod::McDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoringMethod::Real => "real",
            ScoringMethod::Msp => "msp",
            ScoringMethod::MaxLogit => "maxlogit",
            ScoringMethod::McDropout => "mcdropout",
        }
    }
}

impl std::fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScoringMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoringMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scoring method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Threshold on the unknown confidence; `None` until calibrated.
    pub lambda_th: Option<f64>,
    /// Number of dropout passes for MC-Dropout.
    pub mc_passes: usize,
    pub scoring_method: ScoringMethod,
    /// Fraction of known validation points kept below the threshold.
    pub target_tpr: f64,
    /// Seed of the dropout stream used by MC-Dropout.
    pub mc_seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            lambda_th: None,
            mc_passes: 10,
            scoring_method: ScoringMethod::Real,
            target_tpr: 0.95,
            mc_seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scoring_method == ScoringMethod::McDropout && self.mc_passes < 2 {
            return Err(Error::config("mc_passes must be at least 2 for mcdropout"));
        }
        if !(self.target_tpr > 0.0 && self.target_tpr < 1.0) {
            return Err(Error::config("target_tpr must lie in (0, 1)"));
        }
        if self.lambda_th.is_some_and(f64::is_nan) {
            return Err(Error::config("lambda_th must not be NaN"));
        }
        Ok(())
    }

    fn threshold(&self) -> Result<f64> {
        self.lambda_th
            .ok_or_else(|| Error::config("lambda_th is not set; calibrate the threshold first"))
    }
}

/// Logits of the closed-set part: `y_old`, followed by `y_nv` after IL.
fn closed_logits(bundle: &LogitsBundle) -> Array2<f64> {
    if bundle.y_nv.ncols() == 0 {
        bundle.y_old.clone()
    } else {
        concatenate(Axis(1), &[bundle.y_old.view(), bundle.y_nv.view()]).expect("row counts agree")
    }
}

fn row_argmax(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()).expect("nonempty row").0)
        .collect()
}

/// `λ_conf` per point: maximum over the unknown-dedicated slots.
pub fn unknown_confidence(bundle: &LogitsBundle) -> Result<Vec<f64>> {
    if bundle.y_uk.ncols() == 0 {
        return Err(Error::domain(
            "real scoring needs a model with redundancy classifiers",
        ));
    }
    Ok(bundle
        .y_uk
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()).expect("nonempty row").1)
        .collect())
}

/// Unknown scores from a single deterministic forward pass. MC-Dropout needs
/// several passes and is only available through [`unknown_score`].
pub fn score_from_logits(bundle: &LogitsBundle, method: ScoringMethod) -> Result<Vec<f64>> {
    let closed = closed_logits(bundle);
    match method {
        ScoringMethod::Real => unknown_confidence(bundle),
        ScoringMethod::Msp => Ok(closed
            .rows()
            .into_iter()
            .map(|r| 1.0 - softmax(r).into_iter().fold(0.0, f64::max))
            .collect()),
        ScoringMethod::MaxLogit => Ok(closed
            .rows()
            .into_iter()
            .map(|r| -r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()),
        ScoringMethod::McDropout => Err(Error::domain(
            "mcdropout needs repeated stochastic passes; use unknown_score",
        )),
    }
}

/// Entropy of the mean softmax over the given passes.
pub fn predictive_entropy(passes: &[Array2<f64>]) -> Result<Vec<f64>> {
    let first = passes
        .first()
        .ok_or_else(|| Error::domain("predictive entropy needs at least one pass"))?;
    let (m, d) = first.dim();
    let mut mean = Array2::<f64>::zeros((m, d));
    for p in passes {
        if p.dim() != (m, d) {
            return Err(Error::domain("dropout passes differ in shape"));
        }
        for (i, row) in p.rows().into_iter().enumerate() {
            for (j, v) in softmax(row).into_iter().enumerate() {
                mean[[i, j]] += v;
            }
        }
    }
    mean /= passes.len() as f64;
    Ok(mean
        .rows()
        .into_iter()
        .map(|r| {
            -r.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .map(|h| h.max(0.0))
        .collect())
}

/// Per-point unknown score of `scan` under the configured method.
pub fn unknown_score(model: &Model, scan: &Scan, cfg: &InferenceConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    match cfg.scoring_method {
        ScoringMethod::Real if model.stage == Stage::Closed => Err(Error::domain(
            "real scoring is undefined for a closed-stage model",
        )),
        ScoringMethod::McDropout => {
            let features = model.features(scan);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.mc_seed);
            let passes = (0..cfg.mc_passes)
                .map(|_| {
                    let (bundle, _) = model.forward_features(features.clone(), Some(&mut rng))?;
                    Ok(closed_logits(&bundle))
                })
                .collect::<Result<Vec<_>>>()?;
            predictive_entropy(&passes)
        }
        method => score_from_logits(&model.forward(scan, None)?, method),
    }
}

/// Argmax over the normal classifiers, mapped to old-class ids.
pub fn closed_from_logits(registry: &ClassRegistry, bundle: &LogitsBundle) -> LabelSet {
    let labels = row_argmax(bundle.y_old.view())
        .into_iter()
        .map(|j| registry.old_classes()[j])
        .collect::<Vec<_>>();
    let m = labels.len();
    LabelSet::new(labels, vec![false; m], LabelDomain::ClosedOld).expect("lengths agree")
}

/// Argmax over normal and novel-bound classifiers, mapped to class ids.
pub fn post_il_from_logits(registry: &ClassRegistry, bundle: &LogitsBundle) -> LabelSet {
    let known = registry.known_classes();
    let labels = row_argmax(closed_logits(bundle).view())
        .into_iter()
        .map(|j| known[j])
        .collect::<Vec<_>>();
    let m = labels.len();
    let domain = if bundle.y_nv.ncols() == 0 {
        LabelDomain::ClosedOld
    } else {
        LabelDomain::PostIl
    };
    LabelSet::new(labels, vec![false; m], domain).expect("lengths agree")
}

/// Closed prediction with points whose unknown confidence reaches
/// `lambda_th` relabeled as unknown.
pub fn open_from_logits(
    registry: &ClassRegistry,
    bundle: &LogitsBundle,
    lambda_th: f64,
) -> Result<LabelSet> {
    let conf = unknown_confidence(bundle)?;
    let closed = post_il_from_logits(registry, bundle);
    let labels = closed
        .labels()
        .iter()
        .zip(&conf)
        .map(|(&l, &c)| if c < lambda_th { l } else { UNKNOWN_ID })
        .collect::<Vec<_>>();
    let m = labels.len();
    let domain = if registry.num_novel() == 0 {
        LabelDomain::Open
    } else {
        LabelDomain::PostIl
    };
    LabelSet::new(labels, vec![false; m], domain)
}

/// Closed-set prediction over the old classes only.
pub fn predict_closed(model: &Model, scan: &Scan) -> Result<LabelSet> {
    Ok(closed_from_logits(
        &model.registry,
        &model.forward(scan, None)?,
    ))
}

/// Open-set prediction: the closed label where `λ_conf < λ_th`, otherwise
/// unknown. After incremental learning the closed label ranges over the
/// learned novel classes as well.
pub fn predict_open(model: &Model, scan: &Scan, cfg: &InferenceConfig) -> Result<LabelSet> {
    let th = cfg.threshold()?;
    if model.stage == Stage::Closed {
        return Err(Error::domain(
            "open-set prediction needs redundancy classifiers",
        ));
    }
    open_from_logits(&model.registry, &model.forward(scan, None)?, th)
}

/// Threshold below which `target_tpr` of the given known-point scores fall:
/// the `target_tpr` quantile with linear interpolation between order
/// statistics.
pub fn calibrate_threshold(known_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if known_scores.is_empty() {
        return Err(Error::domain(
            "threshold calibration needs at least one score",
        ));
    }
    if !(target_tpr > 0.0 && target_tpr < 1.0) {
        return Err(Error::domain("target_tpr must lie in (0, 1)"));
    }
    if known_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("scores must be finite"));
    }
    let mut sorted = known_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = target_tpr * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Calibrate `λ_th` on the points of `scans` whose ground truth is a class
/// known to the model.
pub fn calibrate_on_validation<'a>(
    model: &Model,
    data: impl IntoIterator<Item = (&'a Scan, &'a LabelSet)>,
    target_tpr: f64,
) -> Result<f64> {
    let mut known = Vec::new();
    for (scan, gt) in data {
        let conf = unknown_confidence(&model.forward(scan, None)?)?;
        known.extend(
            gt.iter()
                .zip(conf)
                .filter(|(l, _)| l.is_some_and(|l| model.registry.is_known(l)))
                .map(|(_, c)| c),
        );
    }
    calibrate_threshold(&known, target_tpr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bundle(y_old: Array2<f64>, y_uk: Array2<f64>) -> LogitsBundle {
        let m = y_old.nrows();
        LogitsBundle {
            y_old,
            y_uk,
            y_nv: Array2::zeros((m, 0)),
        }
    }

    #[test]
    fn msp_of_symmetric_logits() {
        let b = bundle(array![[0.0, 0.0]], Array2::zeros((1, 0)));
        assert_eq!(
            score_from_logits(&b, ScoringMethod::Msp).unwrap(),
            vec![0.5]
        );
    }

    #[test]
    fn maxlogit_negates_max() {
        let b = bundle(array![[3.2, -1.0]], Array2::zeros((1, 0)));
        assert_eq!(
            score_from_logits(&b, ScoringMethod::MaxLogit).unwrap(),
            vec![-3.2]
        );
    }

    #[test]
    fn real_takes_unknown_max() {
        let b = bundle(array![[0.0, 0.0]], array![[0.2, 1.5, -0.3]]);
        assert_eq!(
            score_from_logits(&b, ScoringMethod::Real).unwrap(),
            vec![1.5]
        );
        let closed = bundle(array![[0.0, 0.0]], Array2::zeros((1, 0)));
        assert!(matches!(
            score_from_logits(&closed, ScoringMethod::Real),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn closed_argmax_and_ties() {
        let reg = ClassRegistry::new([1, 2, 3], [4], 3).unwrap();
        let b = bundle(
            array![[0.1, 2.0, -1.0], [0.5, 0.5, 0.5]],
            Array2::zeros((2, 0)),
        );
        assert_eq!(closed_from_logits(&reg, &b).labels(), &[2, 1]);
    }

    #[test]
    fn open_threshold_rule() {
        let reg = ClassRegistry::new([1, 2, 3], [4], 3).unwrap();
        let b = bundle(
            array![[0.1, 2.0, -1.0], [3.0, 0.0, 0.0]],
            array![[2.0, 0.0, 0.0], [0.5, 0.0, 0.0]],
        );
        assert_eq!(open_from_logits(&reg, &b, 1.0).unwrap().labels(), &[0, 1]);
        assert_eq!(
            open_from_logits(&reg, &b, f64::INFINITY).unwrap().labels(),
            &[2, 1]
        );
        assert_eq!(
            open_from_logits(&reg, &b, f64::NEG_INFINITY)
                .unwrap()
                .labels(),
            &[0, 0]
        );
    }

    #[test]
    fn threshold_percentiles() {
        assert_eq!(
            calibrate_threshold(&[4.0, 2.0, 1.0, 3.0], 0.75).unwrap(),
            3.25
        );
        assert_eq!(
            calibrate_threshold(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5).unwrap(),
            3.0
        );
        assert_eq!(calibrate_threshold(&[7.0; 9], 0.95).unwrap(), 7.0);
        assert!(calibrate_threshold(&[], 0.5).is_err());
        assert!(calibrate_threshold(&[1.0], 1.0).is_err());
    }

    #[test]
    fn entropy_of_uniform_and_peaked() {
        let uniform = vec![Array2::zeros((1, 4)); 3];
        let h = predictive_entropy(&uniform).unwrap()[0];
        assert!((h - 4f64.ln()).abs() < 1e-12);
        let peaked = vec![array![[50.0, 0.0, 0.0]]; 2];
        assert!(predictive_entropy(&peaked).unwrap()[0] < 1e-15);
    }

    #[test]
    fn method_names_round_trip() {
        for m in ScoringMethod::ALL {
            assert_eq!(m.name().parse::<ScoringMethod>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!("softmax".parse::<ScoringMethod>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = InferenceConfig {
            scoring_method: ScoringMethod::McDropout,
            mc_passes: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.mc_passes = 2;
        cfg.validate().unwrap();
        assert!(cfg.threshold().is_err());
    }
}
