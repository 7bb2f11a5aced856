//! Parametric synthetic LIDAR-like scenes.
//!
//! A scene is a square ground plane populated with box, cylinder and
//! ellipsoid objects. Points are drawn over all visible surfaces with uniform
//! area density and perturbed by isotropic Gaussian noise. Coordinates and
//! intensities are rounded to `f32` so a generated scene survives a trip
//! through the binary scan format unchanged.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassId, ClassRegistry, LabelSet, Scan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Box,
    Cylinder,
    Ellipsoid,
}

/// Object template. Sizes are full extents `(length, width, height)` in
/// meters; a cylinder uses `length` as its diameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeArchetype {
    pub name: String,
    pub class_id: ClassId,
    pub kind: ShapeKind,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    /// Objects of this archetype per scene.
    pub count: usize,
    /// Mean remission of the archetype's surface.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub points_per_scan: usize,
    pub ground_class: ClassId,
    pub ground_intensity: f64,
    pub known_shape_classes: Vec<ShapeArchetype>,
    /// Archetypes whose labels are withheld from training.
    pub novel_shape_classes: Vec<ShapeArchetype>,
    pub rng_seed: u64,
    /// Side length of the square ground plane in meters.
    pub scene_extent: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            points_per_scan: 4096,
            ground_class: 1,
            ground_intensity: 0.1,
            known_shape_classes: vec![
                ShapeArchetype {
                    name: "building".into(),
                    class_id: 2,
                    kind: ShapeKind::Box,
                    size_min: [7.0, 5.0, 4.5],
                    size_max: [10.0, 7.0, 6.5],
                    count: 1,
                    intensity: 0.3,
                },
                ShapeArchetype {
                    name: "car".into(),
                    class_id: 3,
                    kind: ShapeKind::Box,
                    size_min: [3.8, 1.7, 1.4],
                    size_max: [4.6, 2.0, 1.6],
                    count: 3,
                    intensity: 0.75,
                },
                ShapeArchetype {
                    name: "pedestrian".into(),
                    class_id: 4,
                    kind: ShapeKind::Cylinder,
                    size_min: [0.5, 0.5, 1.6],
                    size_max: [0.7, 0.7, 1.9],
                    count: 3,
                    intensity: 0.5,
                },
            ],
            novel_shape_classes: vec![ShapeArchetype {
                name: "other-vehicle".into(),
                class_id: 5,
                kind: ShapeKind::Ellipsoid,
                size_min: [5.0, 2.2, 1.9],
                size_max: [7.0, 2.8, 2.5],
                count: 1,
                intensity: 0.72,
            }],
            rng_seed: 0,
            scene_extent: 24.0,
            noise_sigma: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_scan == 0 {
            return Err(Error::config("points_per_scan must be positive"));
        }
        if !(self.scene_extent > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::config(
                "scene_extent must be positive and noise_sigma non-negative",
            ));
        }
        let mut ids = vec![self.ground_class];
        for a in self
            .known_shape_classes
            .iter()
            .chain(&self.novel_shape_classes)
        {
            if a.class_id == 0 {
                return Err(Error::config(format!(
                    "archetype {} uses reserved class 0",
                    a.name
                )));
            }
            if (0..3).any(|k| !(a.size_min[k] > 0.0) || a.size_min[k] > a.size_max[k]) {
                return Err(Error::config(format!(
                    "archetype {} has invalid size range",
                    a.name
                )));
            }
            if !(0.0..=1.0).contains(&a.intensity) {
                return Err(Error::config(format!(
                    "archetype {} intensity outside [0, 1]",
                    a.name
                )));
            }
            ids.push(a.class_id);
        }
        for n in &self.novel_shape_classes {
            if n.class_id == self.ground_class
                || self
                    .known_shape_classes
                    .iter()
                    .any(|k| k.class_id == n.class_id)
            {
                return Err(Error::config(format!(
                    "novel archetype {} shares a class with a known archetype",
                    n.name
                )));
            }
        }
        Ok(())
    }

    /// Old classes: ground followed by known archetypes, deduplicated in order.
    pub fn old_class_ids(&self) -> Vec<ClassId> {
        let mut ids = vec![self.ground_class];
        for a in &self.known_shape_classes {
            if !ids.contains(&a.class_id) {
                ids.push(a.class_id);
            }
        }
        ids
    }

    pub fn novel_class_ids(&self) -> Vec<ClassId> {
        let mut ids: Vec<ClassId> = Vec::new();
        for a in &self.novel_shape_classes {
            if !ids.contains(&a.class_id) {
                ids.push(a.class_id);
            }
        }
        ids
    }

    /// Closed-stage registry implied by this configuration.
    pub fn registry(&self, redundancy: usize) -> Result<ClassRegistry> {
        ClassRegistry::new(self.old_class_ids(), self.novel_class_ids(), redundancy)
    }

    fn check_registry(&self, registry: &ClassRegistry) -> Result<()> {
        for id in self
            .old_class_ids()
            .into_iter()
            .chain(self.novel_class_ids())
        {
            if !registry.is_registered(id) {
                return Err(Error::config(format!("class {id} is not in the registry")));
            }
        }
        Ok(())
    }
}

/// Dataset split, chosen by scene seed parity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

pub fn split_of(seed: u64) -> Split {
    if seed.is_multiple_of(2) {
        Split::Train
    } else {
        Split::Val
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub scan: Scan,
    /// Labels visible during closed/open training: novel classes void.
    pub train_labels: LabelSet,
    /// Complete ground truth.
    pub full_labels: LabelSet,
}

#[derive(Clone, Debug)]
struct Placed {
    kind: ShapeKind,
    class_id: ClassId,
    instance: u32,
    center: [f64; 2],
    yaw: f64,
    size: [f64; 3],
    intensity: f64,
}

impl Placed {
    fn radius(&self) -> f64 {
        0.5 * (self.size[0].powi(2) + self.size[1].powi(2)).sqrt()
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.yaw.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn to_world(&self, lx: f64, ly: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * lx - s * ly,
            self.center[1] + s * lx + c * ly,
            z,
        ]
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local(x, y);
        let [l, w, _] = self.size;
        match self.kind {
            ShapeKind::Box => lx.abs() < l / 2.0 && ly.abs() < w / 2.0,
            ShapeKind::Cylinder => lx * lx + ly * ly < (l / 2.0).powi(2),
            ShapeKind::Ellipsoid => (2.0 * lx / l).powi(2) + (2.0 * ly / w).powi(2) < 1.0,
        }
    }

    fn footprint_area(&self) -> f64 {
        let [l, w, _] = self.size;
        match self.kind {
            ShapeKind::Box => l * w,
            ShapeKind::Cylinder => PI * (l / 2.0).powi(2),
            ShapeKind::Ellipsoid => PI * l * w / 4.0,
        }
    }

    fn surface_area(&self) -> f64 {
        let [l, w, h] = self.size;
        match self.kind {
            ShapeKind::Box => 2.0 * (l + w) * h + l * w,
            ShapeKind::Cylinder => PI * l * h + PI * (l / 2.0).powi(2),
            ShapeKind::Ellipsoid => {
                // Knud Thomsen approximation, relative error below 1.1%.
                let (a, b, c) = (l / 2.0, w / 2.0, h / 2.0);
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
        }
    }

    fn sample_surface<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        let [l, w, h] = self.size;
        match self.kind {
            ShapeKind::Box => {
                let faces = [l * w, w * h, w * h, l * h, l * h];
                let face = WeightedIndex::new(faces)
                    .expect("positive face areas")
                    .sample(rng);
                let u = rng.random::<f64>() - 0.5;
                let v = rng.random::<f64>() - 0.5;
                let t = rng.random::<f64>();
                let (lx, ly, z) = match face {
                    0 => (u * l, v * w, h),
                    1 => (l / 2.0, u * w, t * h),
                    2 => (-l / 2.0, u * w, t * h),
                    3 => (u * l, w / 2.0, t * h),
                    _ => (u * l, -w / 2.0, t * h),
                };
                self.to_world(lx, ly, z)
            }
            ShapeKind::Cylinder => {
                let r = l / 2.0;
                let lateral = PI * l * h;
                let top = PI * r * r;
                let theta = rng.random::<f64>() * 2.0 * PI;
                if rng.random::<f64>() * (lateral + top) < lateral {
                    self.to_world(r * theta.cos(), r * theta.sin(), rng.random::<f64>() * h)
                } else {
                    let rr = r * rng.random::<f64>().sqrt();
                    self.to_world(rr * theta.cos(), rr * theta.sin(), h)
                }
            }
            ShapeKind::Ellipsoid => {
                let (a, b, c) = (l / 2.0, w / 2.0, h / 2.0);
                // Uniform-area sampling by rejection against the local stretch factor.
                let gmax = (b * c).max(a * c).max(a * b);
                loop {
                    let z = 2.0 * rng.random::<f64>() - 1.0;
                    let phi = rng.random::<f64>() * 2.0 * PI;
                    let rxy = (1.0 - z * z).sqrt();
                    let (x, y) = (rxy * phi.cos(), rxy * phi.sin());
                    let g =
                        ((b * c * x).powi(2) + (a * c * y).powi(2) + (a * b * z).powi(2)).sqrt();
                    if rng.random::<f64>() * gmax <= g {
                        return self.to_world(a * x, b * y, c + c * z);
                    }
                }
            }
        }
    }
}

fn draw_size<R: Rng>(a: &ShapeArchetype, rng: &mut R) -> [f64; 3] {
    let mut s: [f64; 3] = std::array::from_fn(|k| {
        a.size_min[k] + rng.random::<f64>() * (a.size_max[k] - a.size_min[k])
    });
    if a.kind == ShapeKind::Cylinder {
        s[1] = s[0];
    }
    s
}

const LAYOUT_ATTEMPTS: usize = 20;
const PLACEMENT_ATTEMPTS: usize = 500;
const PLACEMENT_GAP: f64 = 0.5;

fn place_objects<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Result<Vec<Placed>> {
    let half = cfg.scene_extent / 2.0;
    let archetypes: Vec<&ShapeArchetype> = cfg
        .known_shape_classes
        .iter()
        .chain(&cfg.novel_shape_classes)
        .collect();
    let mut objects = Vec::new();
    for a in &archetypes {
        for _ in 0..a.count {
            let size = draw_size(a, rng);
            let yaw = if a.kind == ShapeKind::Cylinder {
                0.0
            } else {
                rng.random::<f64>() * PI
            };
            let jitter = Normal::new(0.0, 0.03).expect("valid sigma").sample(rng);
            let candidate = Placed {
                kind: a.kind,
                class_id: a.class_id,
                instance: objects.len() as u32 + 1,
                center: [0.0, 0.0],
                yaw,
                size,
                intensity: (a.intensity + jitter).clamp(0.0, 1.0),
            };
            if candidate.radius() >= half {
                return Err(Error::Generation(format!(
                    "scene extent {} too small for {}",
                    cfg.scene_extent, a.name
                )));
            }
            objects.push((a.name.clone(), candidate));
        }
    }
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].1.radius().total_cmp(&objects[a].1.radius()));

    'layout: for _ in 0..LAYOUT_ATTEMPTS {
        let mut placed: Vec<Placed> = Vec::with_capacity(objects.len());
        for &k in &order {
            let mut candidate = objects[k].1.clone();
            let r = candidate.radius();
            let fits = (0..PLACEMENT_ATTEMPTS).any(|_| {
                candidate.center = [
                    rng.random_range(-half + r..half - r),
                    rng.random_range(-half + r..half - r),
                ];
                placed.iter().all(|p| {
                    let d = ((p.center[0] - candidate.center[0]).powi(2)
                        + (p.center[1] - candidate.center[1]).powi(2))
                    .sqrt();
                    d > p.radius() + r + PLACEMENT_GAP
                })
            });
            if !fits {
                continue 'layout;
            }
            placed.push(candidate);
        }
        placed.sort_by_key(|p| p.instance);
        return Ok(placed);
    }
    let names: Vec<&str> = objects.iter().map(|(n, _)| n.as_str()).collect();
    Err(Error::Generation(format!(
        "could not place {} within a {} m scene",
        names.join(", "),
        cfg.scene_extent
    )))
}

/// Generate one scene. The same configuration (including `rng_seed`) always
/// yields the same scene.
pub fn generate_scene(cfg: &SceneConfig, registry: &ClassRegistry) -> Result<GeneratedScene> {
    cfg.validate()?;
    cfg.check_registry(registry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let objects = place_objects(cfg, &mut rng)?;

    let ground_area =
        cfg.scene_extent.powi(2) - objects.iter().map(Placed::footprint_area).sum::<f64>();
    if ground_area <= 0.0 {
        return Err(Error::Generation(
            "objects cover the whole ground plane".into(),
        ));
    }
    let mut areas = vec![ground_area];
    areas.extend(objects.iter().map(Placed::surface_area));
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::Generation(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Generation(e.to_string()))?;
    let point_noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let half = cfg.scene_extent / 2.0;

    let m = cfg.points_per_scan;
    let mut points = Vec::with_capacity(m);
    let mut intensity = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    let mut instances = Vec::with_capacity(m);
    for _ in 0..m {
        let s = pick.sample(&mut rng);
        let (p, base, class, inst) = if s == 0 {
            let p = loop {
                let x = rng.random_range(-half..half);
                let y = rng.random_range(-half..half);
                if !objects.iter().any(|o| o.covers(x, y)) {
                    break [x, y, 0.0];
                }
            };
            (p, cfg.ground_intensity, cfg.ground_class, 0)
        } else {
            let o = &objects[s - 1];
            (
                o.sample_surface(&mut rng),
                o.intensity,
                o.class_id,
                o.instance,
            )
        };
        let mut q = [0.0; 3];
        for k in 0..3 {
            let v = if cfg.noise_sigma > 0.0 {
                p[k] + noise.sample(&mut rng)
            } else {
                p[k]
            };
            q[k] = v as f32 as f64;
        }
        let i = (base + point_noise.sample(&mut rng)).clamp(0.0, 1.0) as f32 as f64;
        points.push(q);
        intensity.push(i);
        labels.push(class);
        instances.push(inst);
    }

    let scan = Scan::new(points, Some(intensity), instances)?;
    let full_labels = LabelSet::from_raw_ground_truth(labels);
    let novel = cfg.novel_class_ids();
    let train_labels = full_labels.restrict(crate::types::LabelDomain::ClosedOld, |l| {
        !novel.contains(&l)
    });
    Ok(GeneratedScene {
        scan,
        train_labels,
        full_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (SceneConfig, ClassRegistry) {
        let cfg = SceneConfig::default();
        let reg = cfg.registry(3).unwrap();
        (cfg, reg)
    }

    #[test]
    fn deterministic_under_seed() {
        let (mut cfg, reg) = setup();
        cfg.rng_seed = 17;
        let a = generate_scene(&cfg, &reg).unwrap();
        let b = generate_scene(&cfg, &reg).unwrap();
        assert_eq!(a, b);
        cfg.rng_seed = 18;
        let c = generate_scene(&cfg, &reg).unwrap();
        assert_ne!(a.scan, c.scan);
    }

    #[test]
    fn no_novel_archetypes_means_identical_labels() {
        let (mut cfg, _) = setup();
        cfg.novel_shape_classes.clear();
        let reg = cfg.registry(3).unwrap();
        let s = generate_scene(&cfg, &reg).unwrap();
        assert_eq!(s.train_labels.labels(), s.full_labels.labels());
        assert_eq!(s.train_labels.void_mask(), s.full_labels.void_mask());
    }

    #[test]
    fn novel_points_present_and_void_in_training() {
        let (cfg, reg) = setup();
        let s = generate_scene(&cfg, &reg).unwrap();
        let novel: Vec<usize> = (0..s.scan.len())
            .filter(|&i| s.full_labels.get(i) == Some(5))
            .collect();
        assert!(!novel.is_empty());
        assert!(novel.iter().all(|&i| s.train_labels.get(i).is_none()));
        let others_kept = (0..s.scan.len())
            .filter(|&i| s.full_labels.get(i) != Some(5))
            .all(|i| s.train_labels.get(i) == s.full_labels.get(i));
        assert!(others_kept);
    }

    #[test]
    fn scan_invariants_and_instances() {
        let (cfg, reg) = setup();
        for seed in 0..5 {
            let s = generate_scene(
                &SceneConfig {
                    rng_seed: seed,
                    ..cfg.clone()
                },
                &reg,
            )
            .unwrap();
            assert_eq!(s.scan.len(), cfg.points_per_scan);
            s.full_labels.validate(&reg).unwrap();
            s.train_labels.validate(&reg).unwrap();
            for i in 0..s.scan.len() {
                let ground = s.full_labels.get(i) == Some(cfg.ground_class);
                assert_eq!(ground, s.scan.instance_ids()[i] == 0);
            }
            // Every point is f32-representable.
            for p in s.scan.points() {
                for v in p {
                    assert_eq!(*v, *v as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn every_class_gets_points() {
        let (cfg, reg) = setup();
        let s = generate_scene(&cfg, &reg).unwrap();
        for id in 1..=5 {
            assert!(s.full_labels.labels().contains(&id), "class {id} missing");
        }
    }

    #[test]
    fn tiny_extent_fails() {
        let (mut cfg, reg) = setup();
        cfg.scene_extent = 6.0;
        assert!(matches!(
            generate_scene(&cfg, &reg),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn seed_parity_split() {
        assert_eq!(split_of(4), Split::Train);
        assert_eq!(split_of(7), Split::Val);
    }

    #[test]
    fn ellipsoid_area_matches_sphere() {
        let p = Placed {
            kind: ShapeKind::Ellipsoid,
            class_id: 1,
            instance: 1,
            center: [0.0, 0.0],
            yaw: 0.0,
            size: [2.0, 2.0, 2.0],
            intensity: 0.5,
        };
        assert!((p.surface_area() - 4.0 * PI).abs() < 1e-9);
    }
}
