use ndarray::{array, Array2};
use owseg_core::losses::{loss_cal, softmax};
use owseg_core::types::Stage;

/// Gradient descent on the free logits of one point. Column 0 is unknown.
fn descend(start: Array2<f64>, target: usize, lambda_cal: f64) -> Vec<f64> {
    let mut s = start;
    for _ in 0..5000 {
        let out = loss_cal(s.view(), Stage::Open, &[Some(target)], lambda_cal, false).unwrap();
        s.scaled_add(-0.5, &out.output.grad);
    }
    softmax(s.row(0))
}

#[test]
fn minimizer_puts_ground_truth_first_and_unknown_second() {
    let starts = [
        array![[0.0, 0.0, 0.0, 0.0]],
        array![[-2.0, 1.0, 3.0, 0.5]],
        array![[4.0, -1.0, 0.0, 2.0]],
    ];
    for start in starts {
        for target in 1..4 {
            let p = descend(start.clone(), target, 0.1);
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
            assert_eq!(order[0], target, "probabilities {p:?}");
            assert_eq!(order[1], 0, "probabilities {p:?}");
        }
    }
}

#[test]
fn without_calibration_unknown_is_not_favoured() {
    let p = descend(array![[0.0, 0.0, 0.0, 0.0]], 2, 0.0);
    assert!((p[0] - p[1]).abs() < 1e-9 && (p[0] - p[3]).abs() < 1e-9);
}
