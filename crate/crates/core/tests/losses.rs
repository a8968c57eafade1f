mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use common::{gradient_errors, rng, unit_rows};
use semanticfl::losses::{contrastive_loss, cross_entropy, kd_loss, prox_term, total_loss, Anchors, LossWeights};
use semanticfl::nn::{build_model, Architecture, BackboneSpec, Tensor};

fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, v.to_vec()).unwrap()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let s: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / s).collect()
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_c() {
    for c in [2, 10, 100] {
        let v = cross_entropy(&mat(4, c, &vec![-1.3; 4 * c]), &[0, 1, c - 1, 1]).unwrap();
        assert_abs_diff_eq!(v, (c as f64).ln(), epsilon = 1e-9);
    }
}

#[test]
fn kd_hand_case() {
    let z = [1.0, 0.0, -1.0];
    let f = [0.0, 0.5, 0.0];
    let (p, q) = (softmax(&z), softmax(&f));
    let expect: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    assert_abs_diff_eq!(kd_loss(&mat(1, 3, &z), &mat(1, 3, &f)).unwrap(), expect, epsilon = 1e-9);
    assert_abs_diff_eq!(kd_loss(&mat(1, 3, &z), &mat(1, 3, &z)).unwrap(), 0.0, epsilon = 1e-9);
}

#[test]
fn infonce_two_by_three_hand_case() {
    let feats = [0.6, 0.8, 1.0, 0.0];
    let text = [1.0, 0.0, 0.0, 1.0, -0.6, 0.8];
    let labels = [1, 2];
    let tau = 0.5;
    let mut expect = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let f = &feats[2 * i..2 * i + 2];
        let s: Vec<f64> = (0..3).map(|c| (f[0] * text[2 * c] + f[1] * text[2 * c + 1]) / tau).collect();
        let denom: f64 = s.iter().map(|v| v.exp()).sum();
        expect -= (s[y].exp() / denom).ln();
    }
    expect /= 2.0;
    let v = contrastive_loss(&mat(2, 2, &feats), &mat(3, 2, &text), &labels, tau).unwrap();
    assert_abs_diff_eq!(v, expect, epsilon = 1e-9);
}

#[test]
fn infonce_at_uniform_similarity_is_ln_c() {
    // Features orthogonal to every anchor: all similarities are zero.
    let feats = mat(2, 4, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let text = mat(3, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let v = contrastive_loss(&feats, &text, &[0, 2], 0.07).unwrap();
    assert_abs_diff_eq!(v, 3f64.ln(), epsilon = 1e-9);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(cross_entropy(&mat(1, 3, &[0.0; 3]), &[3]).is_err());
    assert!(cross_entropy(&mat(1, 3, &[0.0; 3]), &[0, 1]).is_err());
    assert!(kd_loss(&mat(1, 3, &[0.0; 3]), &mat(1, 2, &[0.0; 2])).is_err());
    assert!(contrastive_loss(&mat(1, 2, &[1.0, 0.0]), &mat(2, 2, &[1.0, 0.0, 0.0, 1.0]), &[0], 0.0).is_err());
    assert!(prox_term(&[1.0], &[1.0, 2.0], 0.1).is_err());
}

#[test]
fn total_loss_weights_compose_linearly() {
    let mut r = rng(3);
    let logits = Tensor::matrix(4, 5, common::gaussian(&mut r, 20)).unwrap();
    let features = unit_rows(&mut r, 4, 8);
    let visual = unit_rows(&mut r, 4, 8);
    let text = unit_rows(&mut r, 5, 8);
    let labels = [0, 4, 2, 2];
    let out = semanticfl::nn::ModelOutput { logits, features };
    let anchors = Anchors {
        visual: Some(&visual),
        text: Some(&text),
    };
    let w = LossWeights {
        lambda_kd: 0.3,
        lambda_con: 0.7,
        tau: 0.2,
        ..LossWeights::default()
    };
    let b = total_loss(&out, anchors, &labels, &w).unwrap();
    assert_abs_diff_eq!(b.ce, cross_entropy(&out.logits, &labels).unwrap(), epsilon = 1e-12);
    assert_abs_diff_eq!(b.kd, kd_loss(&visual, &out.features).unwrap(), epsilon = 1e-12);
    assert_abs_diff_eq!(b.con, contrastive_loss(&out.features, &text, &labels, 0.2).unwrap(), epsilon = 1e-12);
    assert_abs_diff_eq!(b.total, b.ce + 0.3 * b.kd + 0.7 * b.con, epsilon = 1e-12);

    // Anchors are optional exactly when their weight is zero.
    let none = Anchors::default();
    assert!(total_loss(&out, none, &labels, &w).is_err());
    let ce_only = total_loss(&out, none, &labels, &LossWeights::cross_entropy_only()).unwrap();
    assert_eq!(ce_only.total, b.ce);
}

#[test]
fn tinycnn_gradient_matches_finite_differences() {
    let spec = BackboneSpec::new(Architecture::Tinycnn, 5, 12, 4).with_input(3, 16);
    let model = build_model(&spec).unwrap();
    let mut r = rng(11);
    let x = Tensor::from_vec([8, 3, 16, 16], common::gaussian(&mut r, 8 * 3 * 16 * 16)).unwrap();
    let labels = [0, 1, 2, 3, 4, 0, 1, 2];
    let visual = Tensor::matrix(8, 12, common::gaussian(&mut r, 96)).unwrap();
    let text = unit_rows(&mut r, 5, 12);
    let w = LossWeights {
        lambda_kd: 1.0,
        lambda_con: 0.5,
        tau: 0.3,
        ..LossWeights::default()
    };
    for (name, rel) in gradient_errors(&model, &x, &labels, &visual, &text, &w, 64) {
        assert!(rel < 1e-4, "{name}: relative error {rel:e}");
    }
}

#[test]
fn resnet_block_gradient_matches_finite_differences() {
    // Residual blocks with batch norm in training mode.
    let spec = BackboneSpec::new(Architecture::Resnet10, 3, 6, 2).with_input(3, 8);
    let model = build_model(&spec).unwrap();
    let mut r = rng(12);
    let x = Tensor::from_vec([4, 3, 8, 8], common::gaussian(&mut r, 4 * 3 * 64)).unwrap();
    let visual = Tensor::matrix(4, 6, common::gaussian(&mut r, 24)).unwrap();
    let text = unit_rows(&mut r, 3, 6);
    let w = LossWeights {
        lambda_kd: 1.0,
        lambda_con: 1.0,
        tau: 0.5,
        ..LossWeights::default()
    };
    let errors = gradient_errors(&model, &x, &[0, 1, 2, 0], &visual, &text, &w, 12);
    assert!(errors.iter().any(|(n, _)| n.contains("bn")), "resnet should expose batch-norm blocks");
    for (name, rel) in errors {
        assert!(rel < 1e-4, "{name}: relative error {rel:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative_and_finite(
        z in prop::collection::vec(-30.0f64..30.0, 12),
        f in prop::collection::vec(-30.0f64..30.0, 12),
        y in 0usize..4,
    ) {
        let ce = cross_entropy(&mat(3, 4, &z), &[y, 0, 3]).unwrap();
        prop_assert!(ce.is_finite() && ce >= 0.0);
        let kd = kd_loss(&mat(3, 4, &z), &mat(3, 4, &f)).unwrap();
        prop_assert!(kd.is_finite() && kd >= -1e-12);
    }

    #[test]
    fn cross_entropy_is_shift_invariant(z in prop::collection::vec(-10.0f64..10.0, 5), s in -50.0f64..50.0) {
        let a = cross_entropy(&mat(1, 5, &z), &[2]).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + s).collect();
        let b = cross_entropy(&mat(1, 5, &shifted), &[2]).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn prox_is_half_mu_squared_distance(a in prop::collection::vec(-5.0f64..5.0, 6), mu in 0.0f64..2.0) {
        let b = vec![0.5; 6];
        let expect = 0.5 * mu * a.iter().map(|x| (x - 0.5).powi(2)).sum::<f64>();
        prop_assert!((prox_term(&a, &b, mu).unwrap() - expect).abs() < 1e-9);
    }
}
