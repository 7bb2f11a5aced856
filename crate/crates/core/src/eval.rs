//! Evaluation metrics: AUROC and AUPR on the known/unknown problem, IoU
//! statistics from a confusion matrix, and unknown-score histograms.
//!
//! Unknown is the positive class throughout. Scores are pooled over all
//! evaluated points rather than averaged per scan.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::openset::ScoringMethod;
use crate::types::{ClassId, ClassRegistry, LabelSet, Stage, UNKNOWN_ID};

fn check_binary_input(scores: &[f64], is_unknown: &[bool]) -> Result<()> {
    if scores.len() != is_unknown.len() {
        return Err(Error::domain("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("scores must be finite"));
    }
    Ok(())
}

/// Probability that a random unknown point outscores a random known point,
/// ties counting one half. Computed from average ranks.
pub fn auroc(scores: &[f64], is_unknown: &[bool]) -> Result<f64> {
    check_binary_input(scores, is_unknown)?;
    let pos = is_unknown.iter().filter(|&&u| u).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::domain("AUROC needs both known and unknown points"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        // Ranks are 1-based; a tied run shares the mean of its ranks.
        let mean_rank = (start + end) as f64 / 2.0 + 1.0;
        let run_pos = order[start..=end]
            .iter()
            .filter(|&&i| is_unknown[i])
            .count();
        rank_sum += mean_rank * run_pos as f64;
        start = end + 1;
    }
    let pos = pos as f64;
    let u = rank_sum - pos * (pos + 1.0) / 2.0;
    Ok(u / (pos * neg as f64))
}

/// Average precision: precision at every distinct score threshold, weighted
/// by the recall gained there, sweeping thresholds from high to low.
pub fn aupr(scores: &[f64], is_unknown: &[bool]) -> Result<f64> {
    check_binary_input(scores, is_unknown)?;
    let pos = is_unknown.iter().filter(|&&u| u).count();
    if pos == 0 {
        return Err(Error::domain("AUPR needs at least one unknown point"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let run_tp = order[start..=end]
            .iter()
            .filter(|&&i| is_unknown[i])
            .count();
        tp += run_tp;
        seen += end - start + 1;
        area += (run_tp as f64 / pos as f64) * (tp as f64 / seen as f64);
        start = end + 1;
    }
    Ok(area)
}

/// Counts of (ground truth, prediction) pairs over `[unknown, K_0.., K_n..]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// Class id of each row and column.
    pub classes: Vec<ClassId>,
    /// `counts[gt][pred]`.
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(registry: &ClassRegistry) -> Confusion {
        let mut classes = vec![UNKNOWN_ID];
        classes.extend(registry.known_classes());
        let d = classes.len();
        Confusion {
            classes,
            counts: vec![vec![0; d]; d],
        }
    }

    fn index(&self, id: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == id)
    }

    /// Add one scan. Void ground truth is skipped; ground truth of classes the
    /// model has not learned counts as unknown.
    pub fn accumulate(
        &mut self,
        pred: &LabelSet,
        gt: &LabelSet,
        registry: &ClassRegistry,
    ) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::domain(
                "prediction and ground truth differ in length",
            ));
        }
        for (p, g) in pred.iter().zip(gt.iter()) {
            let Some(g) = g else { continue };
            let g = if registry.is_known(g) {
                g
            } else if g == UNKNOWN_ID || registry.remaining_novel().contains(&g) {
                UNKNOWN_ID
            } else {
                return Err(Error::domain(format!(
                    "ground-truth class {g} is not registered"
                )));
            };
            let p = p.ok_or_else(|| Error::domain("predictions must not be void"))?;
            let pi = self.index(p).ok_or_else(|| {
                Error::domain(format!("predicted class {p} is not known to the model"))
            })?;
            let gi = self
                .index(g)
                .expect("ground truth mapped into the class list");
            self.counts[gi][pi] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::domain("confusion matrices cover different classes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class occurs in neither
    /// prediction nor ground truth.
    pub fn iou(&self, id: ClassId) -> Option<f64> {
        let k = self.index(id)?;
        let tp = self.counts[k][k];
        let fn_: u64 = self.counts[k].iter().sum::<u64>() - tp;
        let fp: u64 = self.counts.iter().map(|r| r[k]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    fn mean_iou(&self, ids: &[ClassId]) -> f64 {
        let vals: Vec<f64> = ids.iter().filter_map(|&c| self.iou(c)).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Fraction of evaluated points predicted as `id`.
    pub fn predicted_fraction(&self, id: ClassId) -> f64 {
        let Some(k) = self.index(id) else { return 0.0 };
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.counts.iter().map(|r| r[k]).sum::<u64>() as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: ClassId,
    /// Absent when the class occurs in neither prediction nor ground truth.
    pub iou: Option<f64>,
}

/// Binned unknown scores split by ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub count_known: Vec<u64>,
    pub count_unknown: Vec<u64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.count_known.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count_known,count_unknown\n");
        for b in 0..self.bins() {
            writeln!(
                out,
                "{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.count_known[b],
                self.count_unknown[b]
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Equal-width histogram over the observed score range. The last bin is
/// closed on the right. A constant sample lands in the first bin.
pub fn export_histogram(scores: &[f64], is_unknown: &[bool], bins: usize) -> Result<Histogram> {
    check_binary_input(scores, is_unknown)?;
    if bins < 2 {
        return Err(Error::domain("a histogram needs at least two bins"));
    }
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let (lo, hi) = if scores.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|b| if b == bins { hi } else { lo + b as f64 * width })
        .collect();
    let mut count_known = vec![0; bins];
    let mut count_unknown = vec![0; bins];
    for (&s, &u) in scores.iter().zip(is_unknown) {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        if u {
            count_unknown[b] += 1;
        } else {
            count_known[b] += 1;
        }
    }
    Ok(Histogram {
        edges,
        count_known,
        count_unknown,
    })
}

/// Segmentation and open-set metrics of one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<ScoringMethod>,
    pub points: u64,
    pub confusion: Confusion,
    pub per_class_iou: Vec<ClassIou>,
    pub miou: f64,
    pub miou_old: f64,
    pub miou_novel: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aupr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_score_known: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_score_unknown: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
}

impl EvalReport {
    /// IoU summary of a confusion matrix. `miou` averages over
    /// `K_0 ∪ K_n`, `miou_old` over `K_0` and `miou_novel` over `K_n`;
    /// classes absent from both prediction and ground truth are skipped and an
    /// empty average is reported as 0.
    pub fn from_confusion(
        confusion: Confusion,
        registry: &ClassRegistry,
        stage: Stage,
    ) -> Result<EvalReport> {
        if confusion.total() == 0 {
            return Err(Error::domain("no non-void ground truth to evaluate"));
        }
        let known = registry.known_classes();
        let per_class_iou = known
            .iter()
            .map(|&class| ClassIou {
                class,
                iou: confusion.iou(class),
            })
            .collect();
        Ok(EvalReport {
            stage,
            method: None,
            points: confusion.total(),
            miou: confusion.mean_iou(&known),
            miou_old: confusion.mean_iou(registry.old_classes()),
            miou_novel: confusion.mean_iou(registry.learned_novel()),
            per_class_iou,
            confusion,
            auroc: None,
            aupr: None,
            mean_score_known: None,
            mean_score_unknown: None,
            histogram: None,
        })
    }

    /// Attach threshold-free open-set metrics for `method`.
    pub fn with_scores(
        mut self,
        method: ScoringMethod,
        scores: &[f64],
        is_unknown: &[bool],
        bins: usize,
    ) -> Result<EvalReport> {
        self.method = Some(method);
        self.auroc = Some(auroc(scores, is_unknown)?);
        self.aupr = Some(aupr(scores, is_unknown)?);
        let mean = |want: bool| {
            let v: Vec<f64> = scores
                .iter()
                .zip(is_unknown)
                .filter(|(_, &u)| u == want)
                .map(|(&s, _)| s)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.mean_score_known = Some(mean(false));
        self.mean_score_unknown = Some(mean(true));
        self.histogram = Some(export_histogram(scores, is_unknown, bins)?);
        Ok(self)
    }
}

/// IoU report for a single prediction/ground-truth pair.
pub fn miou_report(
    pred: &LabelSet,
    gt: &LabelSet,
    registry: &ClassRegistry,
    stage: Stage,
) -> Result<EvalReport> {
    let mut confusion = Confusion::new(registry);
    confusion.accumulate(pred, gt, registry)?;
    EvalReport::from_confusion(confusion, registry, stage)
}
