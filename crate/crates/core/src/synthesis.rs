//! Unknown-object synthesis: selected instances of source classes are resized
//! about their centroid to act as pseudo-unknown training objects.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassId, ClassRegistry, LabelSet, Scan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Classes whose instances may be resized.
    pub source_classes: Vec<ClassId>,
    /// Per-instance selection probability.
    pub p_syn: f64,
    pub shrink_range: [f64; 2],
    pub grow_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            source_classes: vec![3],
            p_syn: 0.5,
            shrink_range: [0.25, 0.5],
            grow_range: [1.5, 3.0],
            rng_seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_syn) {
            return Err(Error::config("p_syn must lie in [0, 1]"));
        }
        for (name, [lo, hi]) in [("shrink", self.shrink_range), ("grow", self.grow_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) || (lo..=hi).contains(&1.0) {
                return Err(Error::config(format!(
                    "{name} range [{lo}, {hi}] must be positive, ordered and exclude 1"
                )));
            }
        }
        Ok(())
    }
}

/// Scale points about their centroid: `c + factor * (p - c)`.
pub fn resize_instance(points: &[[f64; 3]], factor: f64) -> Result<Vec<[f64; 3]>> {
    if points.is_empty() {
        return Err(Error::domain("cannot resize an empty instance"));
    }
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::domain(format!(
            "resize factor {factor} must be finite and positive"
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("instance points must be finite"));
    }
    let c = centroid(points);
    Ok(points
        .iter()
        .map(|p| {
            [
                c[0] + factor * (p[0] - c[0]),
                c[1] + factor * (p[1] - c[1]),
                c[2] + factor * (p[2] - c[2]),
            ]
        })
        .collect())
}

pub fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

/// A scan after synthesis together with the partition into P_syn / P_nm.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutcome {
    pub scan: Scan,
    /// True for points of resized instances (P_syn).
    pub syn_mask: Vec<bool>,
    /// `(instance id, factor)` for every resized instance.
    pub resized: Vec<(u32, f64)>,
    /// Number of instances that were eligible for selection.
    pub eligible: usize,
}

/// Majority non-void label per instance (ties toward the lowest class id).
fn instance_classes(scan: &Scan, labels: &LabelSet) -> BTreeMap<u32, (ClassId, Vec<usize>)> {
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &inst) in scan.instance_ids().iter().enumerate() {
        if inst != 0 {
            members.entry(inst).or_default().push(i);
        }
    }
    members
        .into_iter()
        .filter_map(|(inst, idx)| {
            let mut votes: BTreeMap<ClassId, usize> = BTreeMap::new();
            for &i in &idx {
                if let Some(l) = labels.get(i) {
                    *votes.entry(l).or_default() += 1;
                }
            }
            let best = votes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&c, _)| c)?;
            Some((inst, (best, idx)))
        })
        .collect()
}

/// Resize randomly selected instances of the source classes.
///
/// Instances are visited in ascending id order. Each eligible instance is
/// selected with probability `p_syn`; a fair coin then picks the shrink or
/// grow range and the factor is uniform within it.
pub fn apply_synthesis<R: Rng>(
    scan: &Scan,
    labels: &LabelSet,
    cfg: &SynthesisConfig,
    registry: &ClassRegistry,
    rng: &mut R,
) -> Result<SynthesisOutcome> {
    cfg.validate()?;
    if labels.len() != scan.len() {
        return Err(Error::domain("labels do not match scan length"));
    }
    if let Some(c) = cfg.source_classes.iter().find(|&&c| !registry.is_known(c)) {
        return Err(Error::domain(format!(
            "synthesis source class {c} is not known to the model"
        )));
    }
    let mut points = scan.points().to_vec();
    let mut syn_mask = vec![false; scan.len()];
    let mut resized = Vec::new();
    let mut eligible = 0;
    for (inst, (class, idx)) in instance_classes(scan, labels) {
        if !cfg.source_classes.contains(&class) {
            continue;
        }
        eligible += 1;
        if rng.random::<f64>() >= cfg.p_syn {
            continue;
        }
        let [lo, hi] = if rng.random_bool(0.5) {
            cfg.shrink_range
        } else {
            cfg.grow_range
        };
        let factor = rng.random_range(lo..=hi);
        let original: Vec<[f64; 3]> = idx.iter().map(|&i| points[i]).collect();
        let scaled = resize_instance(&original, factor)?;
        for (&i, p) in idx.iter().zip(scaled) {
            points[i] = p;
            syn_mask[i] = true;
        }
        resized.push((inst, factor));
    }
    Ok(SynthesisOutcome {
        scan: scan.with_points(points)?,
        syn_mask,
        resized,
        eligible,
    })
}
