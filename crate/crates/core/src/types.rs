//! Domain types shared by every stage of the pipeline.
//!
//! The [`ClassRegistry`] tracks how the label space evolves: old classes the
//! closed-set model was trained on, novel classes promoted by incremental
//! learning, and novel classes the model still treats as unknown. Class id 0
//! is reserved for the unknown class and never names a semantic category.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u32;

/// Reserved label of the unknown class.
pub const UNKNOWN_ID: ClassId = 0;

/// Model stage: closed-set, open-set, or after at least one incremental stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Closed,
    Open,
    PostIl,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Closed => write!(f, "closed"),
            Stage::Open => write!(f, "open"),
            Stage::PostIl => write!(f, "post-il"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RegistryRepr {
    old_classes: Vec<ClassId>,
    learned_novel: Vec<ClassId>,
    remaining_novel: BTreeSet<ClassId>,
    rc_total: usize,
    rc_assigned: BTreeMap<usize, ClassId>,
}

/// Partition of class ids into old, learned-novel and remaining-novel sets,
/// plus the binding of redundancy-classifier slots to learned classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RegistryRepr", into = "RegistryRepr")]
pub struct ClassRegistry {
    old_classes: Vec<ClassId>,
    learned_novel: Vec<ClassId>,
    remaining_novel: BTreeSet<ClassId>,
    rc_total: usize,
    rc_assigned: BTreeMap<usize, ClassId>,
}

impl TryFrom<RegistryRepr> for ClassRegistry {
    type Error = Error;

    fn try_from(r: RegistryRepr) -> Result<Self> {
        let reg = ClassRegistry {
            old_classes: r.old_classes,
            learned_novel: r.learned_novel,
            remaining_novel: r.remaining_novel,
            rc_total: r.rc_total,
            rc_assigned: r.rc_assigned,
        };
        reg.validate()?;
        Ok(reg)
    }
}

impl From<ClassRegistry> for RegistryRepr {
    fn from(r: ClassRegistry) -> Self {
        RegistryRepr {
            old_classes: r.old_classes,
            learned_novel: r.learned_novel,
            remaining_novel: r.remaining_novel,
            rc_total: r.rc_total,
            rc_assigned: r.rc_assigned,
        }
    }
}

impl ClassRegistry {
    /// Registry of a fresh closed-set model with `redundancy` unknown slots
    /// reserved for the open-set stage.
    pub fn new(
        old_classes: impl IntoIterator<Item = ClassId>,
        remaining_novel: impl IntoIterator<Item = ClassId>,
        redundancy: usize,
    ) -> Result<Self> {
        let reg = ClassRegistry {
            old_classes: old_classes.into_iter().collect(),
            learned_novel: Vec::new(),
            remaining_novel: remaining_novel.into_iter().collect(),
            rc_total: redundancy,
            rc_assigned: BTreeMap::new(),
        };
        reg.validate()?;
        Ok(reg)
    }

    fn validate(&self) -> Result<()> {
        if self.old_classes.is_empty() {
            return Err(Error::domain("registry needs at least one old class"));
        }
        let mut seen = BTreeSet::new();
        for &id in self
            .old_classes
            .iter()
            .chain(&self.learned_novel)
            .chain(&self.remaining_novel)
        {
            if id == UNKNOWN_ID {
                return Err(Error::domain("class id 0 is reserved for unknown"));
            }
            if !seen.insert(id) {
                return Err(Error::domain(format!(
                    "class {id} appears in more than one set"
                )));
            }
        }
        if self.rc_assigned.len() != self.learned_novel.len() {
            return Err(Error::domain(
                "every learned novel class needs exactly one slot",
            ));
        }
        if self.rc_total <= self.learned_novel.len() {
            return Err(Error::domain("no unknown-dedicated redundancy slot left"));
        }
        let assigned: BTreeSet<ClassId> = self.rc_assigned.values().copied().collect();
        let learned: BTreeSet<ClassId> = self.learned_novel.iter().copied().collect();
        if assigned != learned {
            return Err(Error::domain("slot bindings disagree with learned classes"));
        }
        if self.rc_assigned.keys().any(|&s| s >= self.rc_total) {
            return Err(Error::domain("slot binding out of range"));
        }
        Ok(())
    }

    /// Old classes K_0 in head order.
    pub fn old_classes(&self) -> &[ClassId] {
        &self.old_classes
    }

    /// Learned novel classes K_n in promotion order.
    pub fn learned_novel(&self) -> &[ClassId] {
        &self.learned_novel
    }

    pub fn remaining_novel(&self) -> &BTreeSet<ClassId> {
        &self.remaining_novel
    }

    pub fn num_old(&self) -> usize {
        self.old_classes.len()
    }

    pub fn num_novel(&self) -> usize {
        self.learned_novel.len()
    }

    /// Total redundancy slots, unknown-dedicated plus assigned.
    pub fn rc_total(&self) -> usize {
        self.rc_total
    }

    pub fn rc_assigned(&self) -> &BTreeMap<usize, ClassId> {
        &self.rc_assigned
    }

    pub fn unknown_slot_count(&self) -> usize {
        self.rc_total - self.learned_novel.len()
    }

    /// Unassigned slot indices in ascending order.
    pub fn unknown_slots(&self) -> Vec<usize> {
        (0..self.rc_total)
            .filter(|s| !self.rc_assigned.contains_key(s))
            .collect()
    }

    /// Slot index of each learned novel class, in promotion order.
    pub fn novel_slots(&self) -> Vec<usize> {
        self.learned_novel
            .iter()
            .map(|c| {
                *self
                    .rc_assigned
                    .iter()
                    .find(|(_, v)| *v == c)
                    .map(|(k, _)| k)
                    .expect("validated registry binds every learned class")
            })
            .collect()
    }

    pub fn is_old(&self, id: ClassId) -> bool {
        self.old_classes.contains(&id)
    }

    pub fn is_learned_novel(&self, id: ClassId) -> bool {
        self.learned_novel.contains(&id)
    }

    /// Whether the model can name `id` (old or learned novel).
    pub fn is_known(&self, id: ClassId) -> bool {
        self.is_old(id) || self.is_learned_novel(id)
    }

    pub fn is_registered(&self, id: ClassId) -> bool {
        self.is_known(id) || self.remaining_novel.contains(&id)
    }

    /// K_0 followed by K_n.
    pub fn known_classes(&self) -> Vec<ClassId> {
        self.old_classes
            .iter()
            .chain(&self.learned_novel)
            .copied()
            .collect()
    }

    /// Column of `id` in the assembled score vector `[unknown, old.., novel..]`.
    pub fn assembled_index(&self, id: ClassId) -> Option<usize> {
        if id == UNKNOWN_ID {
            return Some(0);
        }
        if let Some(i) = self.old_classes.iter().position(|&c| c == id) {
            return Some(1 + i);
        }
        self.learned_novel
            .iter()
            .position(|&c| c == id)
            .map(|j| 1 + self.num_old() + j)
    }

    /// Inverse of [`assembled_index`](Self::assembled_index).
    pub fn class_at_assembled(&self, index: usize) -> Option<ClassId> {
        let c = self.num_old();
        match index {
            0 => Some(UNKNOWN_ID),
            i if i <= c => Some(self.old_classes[i - 1]),
            i => self.learned_novel.get(i - 1 - c).copied(),
        }
    }

    /// Promote classes from K_rn to K_n. Each promoted class takes the lowest
    /// free unknown slot, and one fresh unknown slot is appended so the
    /// unknown-dedicated count stays constant.
    pub fn advance(&self, promoted: &[ClassId]) -> Result<ClassRegistry> {
        let mut next = self.clone();
        for &id in promoted {
            if id == UNKNOWN_ID {
                return Err(Error::domain("cannot promote the unknown class"));
            }
            if next.is_old(id) {
                return Err(Error::domain(format!("class {id} is already an old class")));
            }
            if next.is_learned_novel(id) {
                return Err(Error::domain(format!("class {id} is already learned")));
            }
            if !next.remaining_novel.remove(&id) {
                return Err(Error::domain(format!(
                    "class {id} is not a remaining novel class"
                )));
            }
            let slot = (0..next.rc_total)
                .find(|s| !next.rc_assigned.contains_key(s))
                .ok_or_else(|| Error::Internal("no free redundancy slot".into()))?;
            next.rc_assigned.insert(slot, id);
            next.learned_novel.push(id);
            next.rc_total += 1;
        }
        next.validate()?;
        Ok(next)
    }
}

/// One LIDAR frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    points: Vec<[f64; 3]>,
    intensity: Option<Vec<f64>>,
    instance_ids: Vec<u32>,
}

impl Scan {
    pub fn new(
        points: Vec<[f64; 3]>,
        intensity: Option<Vec<f64>>,
        instance_ids: Vec<u32>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("scan must contain at least one point"));
        }
        if instance_ids.len() != points.len() {
            return Err(Error::domain(
                "instance id count does not match point count",
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("scan coordinates must be finite"));
        }
        if let Some(int) = &intensity {
            if int.len() != points.len() {
                return Err(Error::domain("intensity count does not match point count"));
            }
            if int.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::domain("intensity must lie in [0, 1]"));
            }
        }
        Ok(Scan {
            points,
            intensity,
            instance_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    pub fn instance_ids(&self) -> &[u32] {
        &self.instance_ids
    }

    /// Replace instance ids, e.g. after pairing with a label file.
    pub fn with_instance_ids(mut self, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != self.points.len() {
            return Err(Error::domain(
                "instance id count does not match point count",
            ));
        }
        self.instance_ids = ids;
        Ok(self)
    }

    /// Same scan with new coordinates (point count must match).
    pub fn with_points(&self, points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != self.points.len() {
            return Err(Error::domain("point count changed"));
        }
        Scan::new(points, self.intensity.clone(), self.instance_ids.clone())
    }

    /// Subset of points by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Scan::new(
            idx.iter().map(|&i| self.points[i]).collect(),
            self.intensity
                .as_ref()
                .map(|v| idx.iter().map(|&i| v[i]).collect()),
            idx.iter().map(|&i| self.instance_ids[i]).collect(),
        )
    }
}

/// Which ids a [`LabelSet`] may carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelDomain {
    /// Old classes only.
    ClosedOld,
    /// Unknown plus old classes.
    Open,
    /// Unknown, old and learned novel classes.
    PostIl,
    /// Any class registered with the dataset (old, learned or remaining novel).
    GroundTruth,
}

/// Per-point semantic labels with a void mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<ClassId>,
    void_mask: Vec<bool>,
    domain: LabelDomain,
}

impl LabelSet {
    pub fn new(labels: Vec<ClassId>, void_mask: Vec<bool>, domain: LabelDomain) -> Result<Self> {
        if labels.len() != void_mask.len() {
            return Err(Error::domain("label and void mask lengths differ"));
        }
        Ok(LabelSet {
            labels,
            void_mask,
            domain,
        })
    }

    /// Ground-truth labels where 0 marks unlabeled (void) points, as in label files.
    pub fn from_raw_ground_truth(labels: Vec<ClassId>) -> Self {
        let void_mask = labels.iter().map(|&l| l == UNKNOWN_ID).collect();
        LabelSet {
            labels,
            void_mask,
            domain: LabelDomain::GroundTruth,
        }
    }

    /// Every point void.
    pub fn all_void(len: usize, domain: LabelDomain) -> Self {
        LabelSet {
            labels: vec![UNKNOWN_ID; len],
            void_mask: vec![true; len],
            domain,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn domain(&self) -> LabelDomain {
        self.domain
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn void_mask(&self) -> &[bool] {
        &self.void_mask
    }

    /// Label of point `i`, `None` when void.
    pub fn get(&self, i: usize) -> Option<ClassId> {
        (!self.void_mask[i]).then_some(self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<ClassId>> + '_ {
        self.labels
            .iter()
            .zip(&self.void_mask)
            .map(|(&l, &v)| (!v).then_some(l))
    }

    pub fn non_void_count(&self) -> usize {
        self.void_mask.iter().filter(|v| !**v).count()
    }

    /// Check every non-void label against the declared domain.
    pub fn validate(&self, registry: &ClassRegistry) -> Result<()> {
        for l in self.iter().flatten() {
            let ok = match self.domain {
                LabelDomain::ClosedOld => registry.is_old(l),
                LabelDomain::Open => l == UNKNOWN_ID || registry.is_old(l),
                LabelDomain::PostIl => l == UNKNOWN_ID || registry.is_known(l),
                LabelDomain::GroundTruth => registry.is_registered(l),
            };
            if !ok {
                return Err(Error::domain(format!(
                    "label {l} outside domain {:?}",
                    self.domain
                )));
            }
        }
        Ok(())
    }

    /// Keep only labels for which `keep` holds; everything else becomes void.
    pub fn restrict(&self, domain: LabelDomain, keep: impl Fn(ClassId) -> bool) -> LabelSet {
        let mut labels = self.labels.clone();
        let mut void_mask = self.void_mask.clone();
        for (l, v) in labels.iter_mut().zip(void_mask.iter_mut()) {
            if !*v && !keep(*l) {
                *v = true;
                *l = UNKNOWN_ID;
            }
        }
        LabelSet {
            labels,
            void_mask,
            domain,
        }
    }

    /// Training view for closed and open-set stages: novel classes become void.
    pub fn old_class_view(&self, registry: &ClassRegistry) -> LabelSet {
        self.restrict(LabelDomain::ClosedOld, |l| registry.is_old(l))
    }

    /// Annotation of a single introduced class; everything else void.
    pub fn single_class_view(&self, class: ClassId) -> LabelSet {
        self.restrict(LabelDomain::PostIl, |l| l == class)
    }

    pub fn select(&self, idx: &[usize]) -> LabelSet {
        LabelSet {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            void_mask: idx.iter().map(|&i| self.void_mask[i]).collect(),
            domain: self.domain,
        }
    }
}

/// Raw per-point head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsBundle {
    /// M×C normal-classifier logits.
    pub y_old: Array2<f64>,
    /// M×u logits of unknown-dedicated redundancy slots (u = 0 at closed stage).
    pub y_uk: Array2<f64>,
    /// M×n logits of slots bound to learned novel classes.
    pub y_nv: Array2<f64>,
}

impl LogitsBundle {
    pub fn len(&self) -> usize {
        self.y_old.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y_old.nrows() == 0
    }

    pub fn check(&self, registry: &ClassRegistry, stage: Stage) -> Result<()> {
        let m = self.y_old.nrows();
        if self.y_uk.nrows() != m || self.y_nv.nrows() != m {
            return Err(Error::domain("bundle row counts differ"));
        }
        if self.y_old.ncols() != registry.num_old() {
            return Err(Error::domain("y_old width does not match registry"));
        }
        let (uk, nv) = match stage {
            Stage::Closed => (0, 0),
            _ => (registry.unknown_slot_count(), registry.num_novel()),
        };
        if self.y_uk.ncols() != uk || self.y_nv.ncols() != nv {
            return Err(Error::domain(format!(
                "bundle widths ({}, {}) do not match stage {stage} ({uk}, {nv})",
                self.y_uk.ncols(),
                self.y_nv.ncols()
            )));
        }
        let finite = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
        if !(finite(&self.y_old) && finite(&self.y_uk) && finite(&self.y_nv)) {
            return Err(Error::numeric("non-finite logits"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kitti_like() -> ClassRegistry {
        ClassRegistry::new(1..=18, [19], 3).unwrap()
    }

    #[test]
    fn promote_other_vehicle() {
        let reg = kitti_like().advance(&[19]).unwrap();
        assert_eq!(reg.learned_novel(), &[19]);
        assert_eq!(reg.num_novel(), 1);
        assert!(reg.remaining_novel().is_empty());
        assert_eq!(reg.unknown_slot_count(), 3);
        assert_eq!(reg.rc_total(), 4);
    }

    #[test]
    fn promote_nothing_is_identity() {
        let reg = kitti_like();
        assert_eq!(reg.advance(&[]).unwrap(), reg);
    }

    #[test]
    fn one_class_per_stage_gets_distinct_slots() {
        let mut reg = ClassRegistry::new(1..=12, 13..=16, 3).unwrap();
        for c in 13..=16 {
            reg = reg.advance(&[c]).unwrap();
        }
        assert_eq!(reg.num_novel(), 4);
        let slots: BTreeSet<usize> = reg.novel_slots().into_iter().collect();
        assert_eq!(slots.len(), 4);
        assert_eq!(reg.unknown_slot_count(), 3);
    }

    #[test]
    fn promotion_guards() {
        let reg = kitti_like();
        assert!(matches!(reg.advance(&[3]), Err(Error::Domain(_))));
        assert!(matches!(reg.advance(&[0]), Err(Error::Domain(_))));
        let learned = reg.advance(&[19]).unwrap();
        assert!(matches!(learned.advance(&[19]), Err(Error::Domain(_))));
        assert!(matches!(reg.advance(&[42]), Err(Error::Domain(_))));
    }

    #[test]
    fn construction_rejects_bad_partitions() {
        assert!(ClassRegistry::new([1, 2], [2], 3).is_err());
        assert!(ClassRegistry::new([0, 1], [], 3).is_err());
        assert!(ClassRegistry::new([1], [], 0).is_err());
    }

    #[test]
    fn assembled_index_roundtrip() {
        let reg = ClassRegistry::new([1, 2, 3], [7, 9], 3)
            .unwrap()
            .advance(&[9])
            .unwrap();
        for id in [0, 1, 2, 3, 9] {
            let i = reg.assembled_index(id).unwrap();
            assert_eq!(reg.class_at_assembled(i), Some(id));
        }
        assert_eq!(reg.assembled_index(9), Some(4));
        assert_eq!(reg.assembled_index(7), None);
    }

    #[test]
    fn serde_rejects_invalid_registry() {
        let reg = kitti_like().advance(&[19]).unwrap();
        let json = serde_json::to_string(&reg).unwrap();
        let back: ClassRegistry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, reg);
        let broken = json.replace("\"rc_total\":4", "\"rc_total\":1");
        assert!(serde_json::from_str::<ClassRegistry>(&broken).is_err());
    }

    #[test]
    fn scan_invariants() {
        assert!(Scan::new(vec![], None, vec![]).is_err());
        assert!(Scan::new(vec![[0.0, f64::NAN, 0.0]], None, vec![0]).is_err());
        assert!(Scan::new(vec![[0.0; 3]], None, vec![]).is_err());
        assert!(Scan::new(vec![[0.0; 3]], Some(vec![1.5]), vec![0]).is_err());
        assert!(Scan::new(vec![[0.0; 3]], Some(vec![0.5]), vec![0]).is_ok());
    }

    #[test]
    fn label_domains() {
        let reg = ClassRegistry::new([1, 2], [5], 3).unwrap();
        let gt = LabelSet::from_raw_ground_truth(vec![1, 2, 5, 0]);
        gt.validate(&reg).unwrap();
        assert_eq!(gt.get(3), None);
        let closed = gt.old_class_view(&reg);
        closed.validate(&reg).unwrap();
        assert_eq!(closed.get(2), None);
        let bad = LabelSet::new(vec![0, 1], vec![false, false], LabelDomain::ClosedOld).unwrap();
        assert!(bad.validate(&reg).is_err());
        let open = LabelSet::new(vec![0, 1], vec![false, false], LabelDomain::Open).unwrap();
        open.validate(&reg).unwrap();
    }

    proptest! {
        #[test]
        fn advance_partition_is_order_insensitive(a in 10u32..15, b in 15u32..20) {
            let reg = ClassRegistry::new(1..=9, 10..20, 3).unwrap();
            let ab = reg.advance(&[a]).unwrap().advance(&[b]).unwrap();
            let ba = reg.advance(&[b]).unwrap().advance(&[a]).unwrap();
            prop_assert_eq!(ab.old_classes(), ba.old_classes());
            let s1: BTreeSet<_> = ab.learned_novel().iter().collect();
            let s2: BTreeSet<_> = ba.learned_novel().iter().collect();
            prop_assert_eq!(s1, s2);
            prop_assert_eq!(ab.remaining_novel(), ba.remaining_novel());
            prop_assert!(ab.unknown_slot_count() > 0);
            prop_assert_eq!(ab.unknown_slot_count(), 3);
        }
    }
}
