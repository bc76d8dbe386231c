mod common;

use common::*;
use uxmil::{Graph, Tensor};

const SEEDS: std::ops::Range<u64> = 0..20;

#[test]
fn matmul_matches_triple_loop() {
    for s in SEEDS {
        assert!(matmul_error(s) <= 1e-12, "seed {s}");
    }
}

#[test]
fn conv2d_matches_sliding_window() {
    for s in SEEDS {
        assert!(conv_error(s) <= 1e-10, "seed {s}");
    }
}

#[test]
fn softmax_matches_exp_normalize() {
    for s in SEEDS {
        assert!(softmax_error(s) <= 1e-12, "seed {s}");
    }
}

#[test]
fn layer_norm_matches_mean_var() {
    for s in SEEDS {
        assert!(layer_norm_error(s) <= 1e-10, "seed {s}");
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    for s in SEEDS {
        assert!(cross_entropy_error(s) <= 1e-10, "seed {s}");
    }
}

#[test]
fn attention_matches_naive_qkv() {
    for s in SEEDS {
        assert!(attention_error(s) <= 1e-8, "seed {s}");
    }
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    for s in SEEDS {
        assert!(equivariance_error(s) <= 1e-8, "seed {s}");
    }
}

#[test]
fn instance_cls_outputs_ignore_instance_order() {
    for s in 0..5 {
        assert!(cls_invariance_error(s) <= 1e-6, "seed {s}");
    }
}

#[test]
fn softmax_ignores_constant_shift() {
    for s in SEEDS {
        assert!(softmax_shift_error(s) <= 1e-12, "seed {s}");
    }
}

#[test]
fn uniform_logits_give_ln7() {
    for s in SEEDS {
        assert!(uniform_ce_error(s) <= 1e-9, "seed {s}");
    }
}

#[test]
fn saturated_target_logit_loss_is_analytic() {
    let mut g = Graph::new();
    let mut v = vec![0.0; 7];
    v[3] = 20.0;
    let l = g.input(Tensor::new(&[1, 7], v).unwrap());
    let loss = g.cross_entropy(l, &[3]).unwrap();
    let want = (6.0 * (-20f64).exp()).ln_1p();
    assert!((g.value(loss).item() - want).abs() < 1e-15);
    assert!(want < 1.3e-8);
}

#[test]
fn conv_constant_input_all_ones_kernel() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 1, 5, 5], 0.7));
    let k = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.input(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert!(g.value(y).data().iter().all(|v| (v - 6.3).abs() < 1e-12));
}
