use owseg_core::data::{generate_scene, SceneConfig};
use owseg_core::synthesis::{apply_synthesis, centroid, resize_instance, SynthesisConfig};
use owseg_core::types::{ClassRegistry, LabelSet, Scan};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

proptest! {
    #[test]
    fn resize_keeps_centroid_and_scales_distances(
        pts in prop::collection::vec(prop::array::uniform3(-50.0..50.0f64), 2..40),
        factor in prop_oneof![0.25..=0.5f64, 1.5..=3.0f64],
    ) {
        let out = resize_instance(&pts, factor).unwrap();
        let (c0, c1) = (centroid(&pts), centroid(&out));
        prop_assert!(dist(c0, c1) <= 1e-6);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d0 = dist(pts[i], pts[j]);
                prop_assume!(d0 > 1e-6);
                let rel = (dist(out[i], out[j]) - factor * d0).abs() / (factor * d0);
                prop_assert!(rel <= 1e-6, "relative error {}", rel);
            }
        }
    }
}

/// One ground point and one two-point car instance.
fn single_car() -> (Scan, LabelSet, ClassRegistry) {
    let scan = Scan::new(
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 1.0], [2.0, 0.0, 1.0]],
        None,
        vec![0, 7, 7],
    )
    .unwrap();
    let labels = LabelSet::from_raw_ground_truth(vec![1, 3, 3]);
    (scan, labels, ClassRegistry::new([1, 2, 3], [4], 3).unwrap())
}

#[test]
fn selection_frequency_and_factor_ranges() {
    let (scan, labels, reg) = single_car();
    let cfg = SynthesisConfig::default();
    assert_eq!(cfg.p_syn, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut selected = 0;
    for _ in 0..10_000 {
        let out = apply_synthesis(&scan, &labels, &cfg, &reg, &mut rng).unwrap();
        assert_eq!(out.eligible, 1);
        for &(_, f) in &out.resized {
            assert!(
                (0.25..=0.5).contains(&f) || (1.5..=3.0).contains(&f),
                "factor {f}"
            );
            selected += 1;
        }
        assert!(!out.syn_mask[0]);
    }
    let freq = selected as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&freq), "selection frequency {freq}");
}

#[test]
fn generated_scenes_partition_into_syn_and_normal() {
    let scene = SceneConfig::default();
    let reg = scene.registry(3).unwrap();
    let cfg = SynthesisConfig {
        p_syn: 1.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..4 {
        let g = generate_scene(
            &SceneConfig {
                rng_seed: seed,
                ..scene.clone()
            },
            &reg,
        )
        .unwrap();
        let out = apply_synthesis(&g.scan, &g.train_labels, &cfg, &reg, &mut rng).unwrap();
        assert_eq!(out.resized.len(), out.eligible);
        for (i, &s) in out.syn_mask.iter().enumerate() {
            assert_eq!(s, g.train_labels.get(i) == Some(3), "point {i}");
            if !s {
                assert_eq!(out.scan.points()[i], g.scan.points()[i]);
            }
        }
    }
}
