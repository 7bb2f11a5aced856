use owseg_core::losses::{loss_and_gradients, loss_value, LossBatch, LossConfig, Objective};
use owseg_core::network::{init_model, ArchConfig, Model};
use owseg_core::types::{ClassRegistry, Scan, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;
/// Denominator floor for entries whose gradient is numerically zero.
const FLOOR: f64 = 1e-3;

fn scan(seed: u64) -> Scan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..32)
        .map(|i| {
            let cx = (i % 4) as f64 * 1.7;
            [
                cx + rng.random_range(-0.8..0.8),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..2.5),
            ]
        })
        .collect();
    let intensity = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
    Scan::new(
        pts,
        Some(intensity),
        (0..32).map(|i| (i % 4) as u32 + 1).collect(),
    )
    .unwrap()
}

fn arch() -> ArchConfig {
    ArchConfig {
        encoder_width: 6,
        hidden_width: 10,
        ..Default::default()
    }
}

/// Worst relative error between the analytic gradient and central differences.
fn max_relative_error(model: &Model, scan: &Scan, batch: &LossBatch, objective: &Objective) -> f64 {
    let feats = model.features(scan);
    let (_, grads) = loss_and_gradients(model, feats.clone(), batch, objective, None).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (ti, a) in analytic.iter().enumerate() {
        for (k, &g) in a.iter().enumerate() {
            let original = probe.params.tensors()[ti].1[k];
            probe.params.tensors_mut()[ti].1[k] = original + STEP;
            let up = loss_value(&probe, feats.clone(), batch, objective).unwrap();
            probe.params.tensors_mut()[ti].1[k] = original - STEP;
            let down = loss_value(&probe, feats.clone(), batch, objective).unwrap();
            probe.params.tensors_mut()[ti].1[k] = original;
            let numeric = (up - down) / (2.0 * STEP);
            let denom = g.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max((g - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn open_set_loss_matches_finite_differences() {
    let reg = ClassRegistry::new([1, 2, 3], [4, 5], 3).unwrap();
    let model = init_model(&reg, &arch(), Stage::Open, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let syn_mask: Vec<bool> = (0..32).map(|i| i % 4 == 2).collect();
    let targets = (0..32)
        .map(|i| {
            if i % 7 == 0 {
                None
            } else {
                Some(rng.random_range(1..4))
            }
        })
        .collect();
    let batch = LossBatch {
        targets,
        syn_mask,
        allow_unknown_targets: false,
    };
    let objective = Objective::OpenWorld(LossConfig::default());
    let err = max_relative_error(&model, &scan(1), &batch, &objective);
    assert!(err < TOLERANCE, "max relative error {err}");
}

#[test]
fn incremental_loss_matches_finite_differences() {
    let reg = ClassRegistry::new([1, 2, 3], [4, 5], 3).unwrap();
    let open = init_model(&reg, &arch(), Stage::Open, 12).unwrap();
    let after = reg.advance(&[4]).unwrap();
    let model = open.reassign_rc(&after, 3).unwrap();
    assert_eq!(model.stage, Stage::PostIl);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let syn_mask: Vec<bool> = (0..32).map(|i| i % 4 == 1).collect();
    // Columns: 0 unknown (pseudo label), 1..=3 old classes, 4 the learned novel class.
    let targets = (0..32)
        .map(|i| {
            if i % 9 == 0 {
                None
            } else {
                Some(rng.random_range(0..5))
            }
        })
        .collect();
    let batch = LossBatch {
        targets,
        syn_mask,
        allow_unknown_targets: true,
    };
    let objective = Objective::OpenWorld(LossConfig {
        lambda_syn: 1.0,
        lambda_cal: 0.1,
    });
    let err = max_relative_error(&model, &scan(2), &batch, &objective);
    assert!(err < TOLERANCE, "max relative error {err}");
}

#[test]
fn closed_set_loss_matches_finite_differences() {
    let reg = ClassRegistry::new([1, 2, 3], [4], 3).unwrap();
    let model = init_model(&reg, &arch(), Stage::Closed, 13).unwrap();
    let batch = LossBatch {
        targets: (0..32).map(|i| Some(i % 3)).collect(),
        syn_mask: vec![false; 32],
        allow_unknown_targets: false,
    };
    let err = max_relative_error(&model, &scan(3), &batch, &Objective::ClosedSet);
    assert!(err < TOLERANCE, "max relative error {err}");
}

#[test]
fn syn_loss_ignores_losing_unknown_slots() {
    let reg = ClassRegistry::new([1, 2], [3], 3).unwrap();
    let model = init_model(&reg, &arch(), Stage::Open, 21).unwrap();
    let one = scan(4).select(&[0]).unwrap();
    let bundle = model.forward(&one, None).unwrap();
    let winner = owseg_core::network::argmax(bundle.y_uk.row(0).iter().copied())
        .unwrap()
        .0;
    let batch = LossBatch {
        targets: vec![None],
        syn_mask: vec![true],
        allow_unknown_targets: false,
    };
    let objective = Objective::OpenWorld(LossConfig {
        lambda_syn: 1.0,
        lambda_cal: 0.0,
    });
    let (_, grads) =
        loss_and_gradients(&model, model.features(&one), &batch, &objective, None).unwrap();
    let g_re = grads.g_re.as_ref().unwrap();
    for slot in 0..3 {
        let row_norm: f64 =
            g_re.weight.row(slot).iter().map(|v| v.abs()).sum::<f64>() + g_re.bias[slot].abs();
        if slot == winner {
            assert!(row_norm > 0.0);
        } else {
            assert_eq!(row_norm, 0.0, "slot {slot} received gradient");
        }
    }
    // A perturbation of a losing slot leaves the loss unchanged.
    let loser = (winner + 1) % 3;
    let mut moved = model.clone();
    moved.params.g_re.as_mut().unwrap().bias[loser] -= 1e-3;
    let f = |m: &Model| loss_value(m, m.features(&one), &batch, &objective).unwrap();
    assert_eq!(f(&model), f(&moved));
}
