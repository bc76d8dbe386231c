mod common;

use common::*;
use uxmil::gradcheck::suite::{model_suite, ops_suite, toy_input, MODEL_TOLERANCE, OPS_TOLERANCE};
use uxmil::model::{Modality, ModelConfig, ModelInput, UxModel};
use uxmil::nn::{MultiHeadAttention, PositionalEncoding, TransformerEncoder};
use uxmil::weights_io::load_weight_records;
use uxmil::{Graph, ParamStore, Tensor};

fn toy_model(seed: u64) -> (UxModel, ModelInput) {
    let cfg = ModelConfig::toy(Modality::Multimodal);
    let model = UxModel::new(&cfg, seed).unwrap();
    let input = toy_input(&cfg, &mut rng(seed + 100));
    (model, input)
}

/// Clip vectors and Z_v for `input`.
fn vision_outputs(model: &UxModel, input: &ModelInput) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut g = Graph::with_params(&model.params);
    let out = model.arch.forward(&mut g, input).unwrap();
    let clips = out.clip_features.iter().map(|&v| g.value(v).data().to_vec()).collect();
    (clips, g.value(out.z_vision.unwrap()).data().to_vec())
}

fn perturb(model: &mut UxModel, prefix: &str) {
    let names: Vec<String> = model.params.names_with_prefix(prefix).map(String::from).collect();
    assert!(!names.is_empty(), "no parameters under {prefix}");
    for name in names {
        let old = model.params.value(model.params.id(&name).unwrap()).clone();
        let new = Tensor::from_fn(old.shape(), |i| old.data()[i] + 0.05 * ((i % 5) as f64 - 2.0));
        model.params.set(&name, new).unwrap();
    }
}

#[test]
fn ops_pass_gradient_checks_across_seeds() {
    for seed in 0..20 {
        for (name, r) in ops_suite(seed, false).unwrap() {
            assert!(r.passed && r.tolerance == OPS_TOLERANCE, "seed {seed} {name}: {}", r.max_rel_error);
        }
    }
}

#[test]
fn injected_fault_is_caught() {
    let entries = ops_suite(0, true).unwrap();
    let (_, r) = entries.iter().find(|(n, _)| n == "fault.square").unwrap();
    assert!(!r.passed);
}

#[test]
fn toy_model_passes_gradient_check_for_every_parameter() {
    for seed in 0..3 {
        let entries = model_suite(seed, 4).unwrap();
        assert_eq!(entries.len(), UxModel::new(&ModelConfig::toy(Modality::Multimodal), 0).unwrap().params.len());
        for (name, r) in entries {
            assert!(r.passed && r.tolerance == MODEL_TOLERANCE, "seed {seed} {name}: {}", r.max_rel_error);
        }
    }
}

#[test]
fn stage2_parameters_leave_clip_vectors_unchanged() {
    let (mut model, input) = toy_model(1);
    let (clips, z) = vision_outputs(&model, &input);
    perturb(&mut model, "vision.stage2");
    let (clips2, z2) = vision_outputs(&model, &input);
    assert_eq!(clips, clips2);
    assert_ne!(z, z2);
}

#[test]
fn editing_one_clip_only_changes_that_clip_vector() {
    let (model, input) = toy_model(2);
    let (clips, z) = vision_outputs(&model, &input);
    let mut edited = input.clone();
    let c = edited.clips.as_mut().unwrap();
    let per_clip = c.numel() / c.shape()[0];
    for v in &mut c.data_mut()[per_clip..2 * per_clip] {
        *v = -*v;
    }
    let (clips2, z2) = vision_outputs(&model, &edited);
    for (i, (a, b)) in clips.iter().zip(&clips2).enumerate() {
        if i == 1 {
            assert_ne!(a, b);
        } else {
            assert_eq!(a, b);
        }
    }
    assert_ne!(z, z2);
}

#[test]
fn identical_clips_give_identical_clip_vectors() {
    let (model, mut input) = toy_model(3);
    let c = input.clips.as_mut().unwrap();
    let per_clip = c.numel() / c.shape()[0];
    let first = c.data()[..per_clip].to_vec();
    c.data_mut()[per_clip..2 * per_clip].copy_from_slice(&first);
    let (clips, _) = vision_outputs(&model, &input);
    assert_eq!(clips[0], clips[1]);
}

#[test]
fn shared_weights_do_not_grow_with_clip_count() {
    let count = |m: usize| {
        let mut cfg = ModelConfig::toy(Modality::VisionOnly);
        cfg.vision.num_clips = m;
        cfg.vision.stage2.max_len = m + 1;
        let model = UxModel::new(&cfg, 0).unwrap();
        let cnn = model.params.names_with_prefix("vision.frame_cnn").count();
        let stage1 = model.params.names_with_prefix("vision.stage1").count();
        let values = model.params.num_values() - (m + 1) * cfg.model_dim;
        (cnn, stage1, values)
    };
    assert_eq!(count(2), count(5));
    let audio = UxModel::new(&ModelConfig::toy(Modality::AudioOnly), 0).unwrap();
    assert_eq!(audio.params.names_with_prefix("audio.cnn").count(), 2 * 2);
}

#[test]
fn unimodal_weight_files_hold_no_foreign_encoder() {
    let dir = tempfile::tempdir().unwrap();
    for (modality, absent) in [(Modality::AudioOnly, "vision."), (Modality::VisionOnly, "audio.")] {
        let cfg = ModelConfig::toy(modality);
        let model = UxModel::new(&cfg, 4).unwrap();
        let path = dir.path().join(format!("{}.uxw", modality.as_str()));
        model.save(&path).unwrap();
        let records = load_weight_records(&path).unwrap();
        assert!(records.iter().all(|(n, _)| !n.starts_with(absent)));
        let loaded = UxModel::load(&path).unwrap();
        let mut input = toy_input(&ModelConfig::toy(Modality::Multimodal), &mut rng(5));
        if modality == Modality::AudioOnly {
            input.clips = None;
        } else {
            input.patches = None;
        }
        let logits = loaded.logits(&input).unwrap();
        assert_eq!(logits.len(), 7);
        assert!(logits.iter().all(|v| v.is_finite()));
        let diff = logits.iter().zip(model.logits(&input).unwrap()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-3, "f32 round trip moved logits by {diff}");
    }
}

#[test]
fn forward_is_deterministic_and_seeds_reproduce_weights() {
    let (model, input) = toy_model(6);
    assert_eq!(model.logits(&input).unwrap(), model.logits(&input).unwrap());
    let (again, _) = toy_model(6);
    let a: Vec<&Tensor> = model.params.iter().map(|p| &p.value).collect();
    let b: Vec<&Tensor> = again.params.iter().map(|p| &p.value).collect();
    assert_eq!(a, b);
}

#[test]
fn single_token_attention_is_one() {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 8, 4, &mut rng(0)).unwrap();
    let mut g = Graph::with_params(&store);
    let x = g.input(uniform(&mut rng(1), &[1, 8], 1.0));
    let (_, probs) = mha.forward(&mut g, x).unwrap();
    assert_eq!(probs.shape(), &[4, 1, 1]);
    assert!(probs.data().iter().all(|&p| p == 1.0));
}

#[test]
fn encoder_maps_have_layer_shape_and_unit_rows() {
    let cfg = encoder_config(8, 3, 6, PositionalEncoding::Learned);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "e", &cfg, &mut rng(2)).unwrap();
    let mut g = Graph::with_params(&store);
    let x = g.input(uniform(&mut rng(3), &[5, 8], 1.0));
    let (_, maps) = enc.forward(&mut g, x).unwrap();
    let maps = maps.unwrap();
    assert_eq!(maps.shape(), &[3, 5, 5]);
    for row in maps.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn empty_stack_only_adds_positions() {
    let cfg = encoder_config(4, 0, 3, PositionalEncoding::Learned);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "e", &cfg, &mut rng(4)).unwrap();
    let x = uniform(&mut rng(5), &[3, 4], 1.0);
    let mut g = Graph::with_params(&store);
    let xv = g.input(x.clone());
    let (y, maps) = enc.forward(&mut g, xv).unwrap();
    assert!(maps.is_none());
    let pos = store.value(store.id("e.positions").unwrap());
    let want: Vec<f64> = x.data().iter().zip(pos.data()).map(|(a, b)| a + b).collect();
    assert_eq!(g.value(y).data(), want.as_slice());
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.input(uniform(&mut rng(6), &[2, 3], 1.0));
    let unused = g.input(Tensor::zeros(&[4]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(x).unwrap().iter().all(|&v| v == 1.0));
    assert!(grads.wrt(unused).map_or(true, |gr| gr.iter().all(|&v| v == 0.0)));
    let m = g.input(Tensor::zeros(&[2, 2]));
    assert!(g.backward(m).is_err());
}

#[test]
fn vision_positions_switch_makes_clip_order_irrelevant() {
    for seed in 0..3 {
        assert!(cls_invariance_error(seed) <= 1e-6);
    }
}

#[test]
fn grad_check_examples() {
    use uxmil::gradcheck::grad_check;
    let x = uniform(&mut rng(8), &[3, 4], 1.0);
    let sq = grad_check(|g, v| { let y = g.mul(v, v)?; g.sum(y) }, &x, 1e-6, 1e-4).unwrap();
    assert!(sq.passed, "{sq:?}");
    let constant = grad_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &x, 1e-6, 1e-4).unwrap();
    assert!(constant.passed && constant.max_rel_error == 0.0);
    let (b, c) = (uniform(&mut rng(9), &[4, 5], 1.0), uniform(&mut rng(10), &[5, 2], 1.0));
    let chain = grad_check(
        |g, v| {
            let (bv, cv) = (g.constant(b.clone()), g.constant(c.clone()));
            let y = g.matmul(v, bv)?;
            let y = g.matmul(y, cv)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        },
        &x,
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(chain.passed, "{chain:?}");
}
