//! C ABI over the `uxmil` model: opaque model handles, integer status codes
//! and a per-thread error message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use uxmil::attention::{attention_rollout, instance_attention};
use uxmil::eval::quantize3;
use uxmil::model::{Modality, ModelConfig, ModelInput, NUM_CLASSES};
use uxmil::{Error, Tensor};

pub const UXMIL_OK: i32 = 0;
/// A required pointer was null or a length did not match.
pub const UXMIL_ERR_ARGUMENT: i32 = 1;
pub const UXMIL_ERR_DIMENSION: i32 = 2;
pub const UXMIL_ERR_EMPTY_SEQUENCE: i32 = 3;
pub const UXMIL_ERR_INDEX: i32 = 4;
pub const UXMIL_ERR_CONTRACT: i32 = 5;
pub const UXMIL_ERR_NON_FINITE: i32 = 6;
pub const UXMIL_ERR_FORMAT: i32 = 7;
pub const UXMIL_ERR_INPUT_TOO_SHORT: i32 = 8;
pub const UXMIL_ERR_INPUT: i32 = 9;
pub const UXMIL_ERR_VALIDATION: i32 = 10;
pub const UXMIL_ERR_CONFIG: i32 = 11;
pub const UXMIL_ERR_DIVERGED: i32 = 12;
pub const UXMIL_ERR_IO: i32 = 13;
pub const UXMIL_ERR_JSON: i32 = 14;
pub const UXMIL_ERR_IMAGE: i32 = 15;
/// A Rust panic was caught at the boundary.
pub const UXMIL_ERR_PANIC: i32 = 16;

pub const UXMIL_PROFILE_STANDARD: i32 = 0;
pub const UXMIL_PROFILE_DESK: i32 = 1;
pub const UXMIL_PROFILE_TOY: i32 = 2;

pub const UXMIL_MODALITY_AUDIO: i32 = 0;
pub const UXMIL_MODALITY_VISION: i32 = 1;
pub const UXMIL_MODALITY_MULTIMODAL: i32 = 2;

pub const UXMIL_NUM_CLASSES: usize = 7;

/// Opaque model handle.
pub struct UxmilModel {
    inner: uxmil::model::UxModel,
}

/// Input geometry a model expects. Sizes are element counts.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UxmilInputDims {
    pub modality: i32,
    pub num_patches: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub frame_size: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(e.code(), e.to_string())
    }
}

fn arg(msg: impl Into<String>) -> Fail {
    Fail(UXMIL_ERR_ARGUMENT, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            UXMIL_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            UXMIL_ERR_PANIC
        }
    }
}

fn modality(code: i32) -> Result<Modality, Fail> {
    match code {
        UXMIL_MODALITY_AUDIO => Ok(Modality::AudioOnly),
        UXMIL_MODALITY_VISION => Ok(Modality::VisionOnly),
        UXMIL_MODALITY_MULTIMODAL => Ok(Modality::Multimodal),
        other => Err(arg(format!("unknown modality code {other}"))),
    }
}

fn modality_code(m: Modality) -> i32 {
    match m {
        Modality::AudioOnly => UXMIL_MODALITY_AUDIO,
        Modality::VisionOnly => UXMIL_MODALITY_VISION,
        Modality::Multimodal => UXMIL_MODALITY_MULTIMODAL,
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(arg("path is null"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| arg("path is not UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn model_ref<'a>(m: *const UxmilModel) -> Result<&'a uxmil::model::UxModel, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| arg("model handle is null"))
}

unsafe fn store(out: *mut *mut UxmilModel, model: uxmil::model::UxModel) -> Result<(), Fail> {
    if out.is_null() {
        return Err(arg("output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(UxmilModel { inner: model }));
    Ok(())
}

unsafe fn tensor(data: *const f64, len: usize, shape: &[usize], what: &str) -> Result<Tensor, Fail> {
    let want: usize = shape.iter().product();
    if data.is_null() || len != want {
        return Err(arg(format!("{what}: expected {want} values {shape:?}, got {len}")));
    }
    Ok(Tensor::new(shape, std::slice::from_raw_parts(data, len).to_vec())?)
}

unsafe fn input(model: &uxmil::model::UxModel, patches: *const f64, patches_len: usize, clips: *const f64, clips_len: usize) -> Result<ModelInput, Fail> {
    let cfg = model.config();
    let (a, v) = (&cfg.audio, &cfg.vision);
    let patches = if cfg.modality.uses_audio() {
        Some(tensor(patches, patches_len, &[a.num_patches, a.patch_height, a.patch_width], "patches")?)
    } else {
        None
    };
    let clips = if cfg.modality.uses_vision() {
        Some(tensor(clips, clips_len, &[v.num_clips, v.frames_per_clip, v.frame_size, v.frame_size], "clips")?)
    } else {
        None
    };
    Ok(ModelInput { patches, clips })
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn uxmil_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uxmil_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Creates a randomly initialised model.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn uxmil_model_new(profile: i32, modality_code: i32, seed: u64, out: *mut *mut UxmilModel) -> i32 {
    guard(|| {
        let m = modality(modality_code)?;
        let cfg = match profile {
            UXMIL_PROFILE_STANDARD => ModelConfig::standard(m),
            UXMIL_PROFILE_DESK => ModelConfig::desk(m),
            UXMIL_PROFILE_TOY => ModelConfig::toy(m),
            other => return Err(arg(format!("unknown profile code {other}"))),
        };
        store(out, uxmil::model::UxModel::new(&cfg, seed)?)
    })
}

/// Loads a weight file and the JSON config saved next to it.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uxmil_model_load(path: *const c_char, out: *mut *mut UxmilModel) -> i32 {
    guard(|| {
        let p = path_arg(path)?;
        store(out, uxmil::model::UxModel::load(p)?)
    })
}

/// Writes the weights to `path` and the config next to it.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn uxmil_model_save(model: *const UxmilModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        Ok(m.save(path_arg(path)?)?)
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uxmil_model_free(model: *mut UxmilModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uxmil_model_input_dims(model: *const UxmilModel, out: *mut UxmilInputDims) -> i32 {
    guard(|| {
        let cfg = model_ref(model)?.config();
        let out = out.as_mut().ok_or_else(|| arg("output pointer is null"))?;
        *out = UxmilInputDims {
            modality: modality_code(cfg.modality),
            num_patches: cfg.audio.num_patches,
            patch_height: cfg.audio.patch_height,
            patch_width: cfg.audio.patch_width,
            num_clips: cfg.vision.num_clips,
            frames_per_clip: cfg.vision.frames_per_clip,
            frame_size: cfg.vision.frame_size,
        };
        Ok(())
    })
}

/// Evaluation-mode logits for one episode. `patches` is `[P, h, w]` and
/// `clips` `[M, T, s, s]`, row-major; the one a unimodal model does not use
/// may be NULL. Writes 7 values to `logits_out`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn uxmil_model_logits(
    model: *const UxmilModel,
    patches: *const f64,
    patches_len: usize,
    clips: *const f64,
    clips_len: usize,
    logits_out: *mut f64,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        if logits_out.is_null() {
            return Err(arg("logits_out is null"));
        }
        let logits = m.logits(&input(m, patches, patches_len, clips, clips_len)?)?;
        std::slice::from_raw_parts_mut(logits_out, NUM_CLASSES).copy_from_slice(&logits);
        Ok(())
    })
}

/// Rollout CLS scores per instance. `patch_scores` receives `P` values
/// (audio models), `clip_scores` `M` values (vision models); pass NULL for a
/// modality the model lacks.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn uxmil_model_attention(
    model: *const UxmilModel,
    patches: *const f64,
    patches_len: usize,
    clips: *const f64,
    clips_len: usize,
    patch_scores: *mut f64,
    clip_scores: *mut f64,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let attn = instance_attention(m, &input(m, patches, patches_len, clips, clips_len)?)?;
        for (res, dst, name) in [(&attn.audio, patch_scores, "patch_scores"), (&attn.vision, clip_scores, "clip_scores")] {
            if let Some(r) = res {
                if dst.is_null() {
                    return Err(arg(format!("{name} is null")));
                }
                std::slice::from_raw_parts_mut(dst, r.cls_scores.len()).copy_from_slice(&r.cls_scores);
            }
        }
        Ok(())
    })
}

/// Maps a 1–7 score to 0 (negative), 1 (neutral) or 2 (positive).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uxmil_quantize3(score: u8, out: *mut u8) -> i32 {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| arg("output pointer is null"))?;
        *out = quantize3(score)?;
        Ok(())
    })
}

/// Attention rollout of `layers` row-stochastic `n×n` maps; writes `n×n`.
///
/// # Safety
/// `maps` must hold `layers·n·n` values and `out` `n·n`.
#[no_mangle]
pub unsafe extern "C" fn uxmil_attention_rollout(maps: *const f64, layers: usize, n: usize, out: *mut f64) -> i32 {
    guard(|| {
        if out.is_null() || layers == 0 || n == 0 {
            return Err(arg("rollout needs a non-empty stack and an output buffer"));
        }
        let t = tensor(maps, layers * n * n, &[layers, n, n], "maps")?;
        let r = attention_rollout(&t)?;
        std::slice::from_raw_parts_mut(out, n * n).copy_from_slice(r.data());
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_line_up_with_the_core() {
        let s = String::new;
        let pairs = [
            (Error::Dimension(s()), UXMIL_ERR_DIMENSION),
            (Error::EmptySequence(s()), UXMIL_ERR_EMPTY_SEQUENCE),
            (Error::Index(s()), UXMIL_ERR_INDEX),
            (Error::Contract(s()), UXMIL_ERR_CONTRACT),
            (Error::NonFinite(s()), UXMIL_ERR_NON_FINITE),
            (Error::Format(s()), UXMIL_ERR_FORMAT),
            (Error::InputTooShort(s()), UXMIL_ERR_INPUT_TOO_SHORT),
            (Error::Input(s()), UXMIL_ERR_INPUT),
            (Error::Validation(s()), UXMIL_ERR_VALIDATION),
            (Error::Config(s()), UXMIL_ERR_CONFIG),
            (Error::Diverged(s()), UXMIL_ERR_DIVERGED),
            (Error::io("x", std::io::Error::other("x")), UXMIL_ERR_IO),
        ];
        for (e, code) in pairs {
            assert_eq!(e.code(), code, "{e}");
        }
    }
}
