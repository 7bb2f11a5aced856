use owseg_core::data::{generate_scene, SceneConfig};
use owseg_core::incremental::make_pseudo_labels;
use owseg_core::network::{init_model, ArchConfig};
use owseg_core::openset::{predict_open, InferenceConfig};
use owseg_core::types::{LabelDomain, Stage};

#[test]
fn union_labels_every_point_with_ground_truth_first() {
    let scene = SceneConfig {
        points_per_scan: 1024,
        ..Default::default()
    };
    let reg = scene.registry(3).unwrap();
    let arch = ArchConfig {
        encoder_width: 4,
        hidden_width: 8,
        ..Default::default()
    };
    let novel = scene.novel_class_ids()[0];
    for (k, th) in [f64::NEG_INFINITY, -0.5, 0.0, 0.5, f64::INFINITY]
        .into_iter()
        .enumerate()
    {
        let model = init_model(&reg, &arch, Stage::Open, k as u64).unwrap();
        let cfg = InferenceConfig {
            lambda_th: Some(th),
            ..Default::default()
        };
        for seed in 0..6 {
            let g = generate_scene(
                &SceneConfig {
                    rng_seed: seed,
                    ..scene.clone()
                },
                &reg,
            )
            .unwrap();
            let gt = g.full_labels.single_class_view(novel);
            let merged = make_pseudo_labels(&model, &g.scan, &gt, &cfg).unwrap();
            let open = predict_open(&model, &g.scan, &cfg).unwrap();
            assert_eq!(merged.domain(), LabelDomain::PostIl);
            assert_eq!(merged.non_void_count(), g.scan.len());
            for i in 0..g.scan.len() {
                let want = gt.get(i).or(open.get(i));
                assert_eq!(merged.get(i), want, "scene {seed} point {i}");
                assert!(merged.get(i).is_some());
            }
        }
    }
}
