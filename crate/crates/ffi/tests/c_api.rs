use std::ffi::{CStr, CString};
use std::ptr;

use uxmil_ffi::*;

fn last_error() -> String {
    let p = uxmil_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn toy(modality: i32) -> *mut UxmilModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { uxmil_model_new(UXMIL_PROFILE_TOY, modality, 3, &mut m) }, UXMIL_OK);
    assert!(!m.is_null());
    m
}

fn inputs(dims: &UxmilInputDims) -> (Vec<f64>, Vec<f64>) {
    let p = dims.num_patches * dims.patch_height * dims.patch_width;
    let c = dims.num_clips * dims.frames_per_clip * dims.frame_size * dims.frame_size;
    ((0..p).map(|i| (i as f64 * 0.37).sin()).collect(), (0..c).map(|i| (i as f64 * 0.11).cos()).collect())
}

#[test]
fn logits_match_the_rust_api_and_survive_save_load() {
    let m = toy(UXMIL_MODALITY_MULTIMODAL);
    let mut dims = UxmilInputDims::default();
    assert_eq!(unsafe { uxmil_model_input_dims(m, &mut dims) }, UXMIL_OK);
    assert_eq!(dims.modality, UXMIL_MODALITY_MULTIMODAL);
    let (p, c) = inputs(&dims);
    let mut logits = [0.0; UXMIL_NUM_CLASSES];
    let rc = unsafe { uxmil_model_logits(m, p.as_ptr(), p.len(), c.as_ptr(), c.len(), logits.as_mut_ptr()) };
    assert_eq!(rc, UXMIL_OK);
    assert!(logits.iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.uxw").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { uxmil_model_save(m, path.as_ptr()) }, UXMIL_OK);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { uxmil_model_load(path.as_ptr(), &mut loaded) }, UXMIL_OK);
    let mut again = [0.0; UXMIL_NUM_CLASSES];
    let rc = unsafe { uxmil_model_logits(loaded, p.as_ptr(), p.len(), c.as_ptr(), c.len(), again.as_mut_ptr()) };
    assert_eq!(rc, UXMIL_OK);
    for (a, b) in logits.iter().zip(&again) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
    unsafe {
        uxmil_model_free(m);
        uxmil_model_free(loaded);
    }
}

#[test]
fn attention_scores_are_distributions() {
    let m = toy(UXMIL_MODALITY_MULTIMODAL);
    let mut dims = UxmilInputDims::default();
    unsafe { uxmil_model_input_dims(m, &mut dims) };
    let (p, c) = inputs(&dims);
    let mut ps = vec![0.0; dims.num_patches];
    let mut cs = vec![0.0; dims.num_clips];
    let rc = unsafe { uxmil_model_attention(m, p.as_ptr(), p.len(), c.as_ptr(), c.len(), ps.as_mut_ptr(), cs.as_mut_ptr()) };
    assert_eq!(rc, UXMIL_OK);
    for s in [&ps, &cs] {
        assert!(s.iter().all(|&v| v >= 0.0));
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    unsafe { uxmil_model_free(m) };
}

#[test]
fn unimodal_model_accepts_null_for_the_other_modality() {
    let m = toy(UXMIL_MODALITY_AUDIO);
    let mut dims = UxmilInputDims::default();
    unsafe { uxmil_model_input_dims(m, &mut dims) };
    let (p, _) = inputs(&dims);
    let mut logits = [0.0; UXMIL_NUM_CLASSES];
    let rc = unsafe { uxmil_model_logits(m, p.as_ptr(), p.len(), ptr::null(), 0, logits.as_mut_ptr()) };
    assert_eq!(rc, UXMIL_OK);
    unsafe { uxmil_model_free(m) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let m = toy(UXMIL_MODALITY_MULTIMODAL);
    let mut logits = [0.0; UXMIL_NUM_CLASSES];
    let short = [0.0; 3];
    let rc = unsafe { uxmil_model_logits(m, short.as_ptr(), 3, short.as_ptr(), 3, logits.as_mut_ptr()) };
    assert_eq!(rc, UXMIL_ERR_ARGUMENT);
    assert!(last_error().contains("patches"), "{}", last_error());

    let mut out = 0u8;
    assert_eq!(unsafe { uxmil_quantize3(9, &mut out) }, UXMIL_ERR_VALIDATION);
    assert!(last_error().contains('9'));
    assert_eq!(unsafe { uxmil_quantize3(6, &mut out) }, UXMIL_OK);
    assert_eq!(out, 2);
    assert!(uxmil_last_error_message().is_null());

    let missing = CString::new("/nonexistent/w.uxw").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { uxmil_model_load(missing.as_ptr(), &mut h) }, UXMIL_ERR_IO);
    assert!(h.is_null());
    assert_eq!(unsafe { uxmil_model_new(9, UXMIL_MODALITY_AUDIO, 0, &mut h) }, UXMIL_ERR_ARGUMENT);
    assert_eq!(unsafe { uxmil_model_logits(ptr::null(), ptr::null(), 0, ptr::null(), 0, logits.as_mut_ptr()) }, UXMIL_ERR_ARGUMENT);
    unsafe {
        uxmil_model_free(m);
        uxmil_model_free(ptr::null_mut());
    }
}

#[test]
fn rollout_through_the_abi() {
    let maps = [0.5, 0.5, 0.5, 0.5];
    let mut out = [0.0; 4];
    assert_eq!(unsafe { uxmil_attention_rollout(maps.as_ptr(), 1, 2, out.as_mut_ptr()) }, UXMIL_OK);
    assert_eq!(out, [0.75, 0.25, 0.25, 0.75]);
    let bad = [0.9, 0.5, 0.5, 0.5];
    assert_eq!(unsafe { uxmil_attention_rollout(bad.as_ptr(), 1, 2, out.as_mut_ptr()) }, UXMIL_ERR_VALIDATION);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(uxmil_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
