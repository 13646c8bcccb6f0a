//! C ABI over the core library: load a trained checkpoint, encode volumes
//! to token features, and score cross-modal alignment.
//!
//! Conventions: every function that can fail returns a [`TacoStatus`];
//! out-parameters are written only on `Ok`. Handles are opaque, owned by
//! the caller, and released with their paired `_free` function exactly
//! once. Handles are not thread-safe; use one per thread. The generated
//! header lands in `include/taco.h`.

use std::ffi::{c_char, CStr};
use std::path::Path;
use taco_core::autodiff::Mat;
use taco_core::error::Error;
use taco_core::metrics::alignment_metrics;
use taco_core::model::{load_checkpoint, patchify, Model};
use taco_core::synthdata::Volume;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TacoStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A path was not valid UTF-8 or could not be read.
    BadPath = 2,
    /// The checkpoint file is malformed.
    BadCheckpoint = 3,
    /// Buffer lengths or shapes do not match the model.
    BadShape = 4,
    /// Input values are non-finite or otherwise out of domain.
    BadInput = 5,
    /// Any other internal failure.
    Internal = 6,
}

fn status_of(e: &Error) -> TacoStatus {
    match e {
        Error::Io { .. } => TacoStatus::BadPath,
        Error::Checkpoint(_) => TacoStatus::BadCheckpoint,
        Error::ShapeMismatch(_) | Error::TooFewTokens { .. } => TacoStatus::BadShape,
        Error::DegenerateNorm { .. } | Error::NonFinite(_) => TacoStatus::BadInput,
        _ => TacoStatus::Internal,
    }
}

/// Opaque trained-model handle.
pub struct TacoModel {
    inner: Model,
}

/// Fixed facts about a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TacoModelInfo {
    pub volume_shape: [usize; 3],
    pub patch: [usize; 3],
    pub token_count: usize,
    pub patch_len: usize,
    pub feature_dim: usize,
    pub depth: usize,
    pub trained_steps: u64,
}

/// Alignment statistics between two encoded token sets; distances are
/// cosine, retrieval fields are percentages in [0, 100].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TacoAlignment {
    pub token_count: usize,
    pub pos_mean: f64,
    pub pos_std: f64,
    pub neg_mean: f64,
    pub neg_std: f64,
    pub hard_neg_mean: f64,
    pub hard_neg_std: f64,
    pub neg_pos_gap: f64,
    pub hard_neg_pos_gap: f64,
    pub top1_retrieval: f64,
    pub top5_retrieval: f64,
    pub pairwise_rank_acc: f64,
    pub mnn_selected_ratio: f64,
}

/// Static version string of the library; never freed by the caller.
#[no_mangle]
pub extern "C" fn taco_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Short static name for a status code; never freed by the caller.
#[no_mangle]
pub extern "C" fn taco_status_name(status: TacoStatus) -> *const c_char {
    let s: &'static str = match status {
        TacoStatus::Ok => "ok\0",
        TacoStatus::NullArgument => "null argument\0",
        TacoStatus::BadPath => "bad path\0",
        TacoStatus::BadCheckpoint => "bad checkpoint\0",
        TacoStatus::BadShape => "bad shape\0",
        TacoStatus::BadInput => "bad input\0",
        TacoStatus::Internal => "internal error\0",
    };
    s.as_ptr() as *const c_char
}

/// Loads a trained checkpoint from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to a writable
/// `*mut TacoModel` slot. On `Ok` the caller owns the handle and must
/// release it with [`taco_model_free`].
#[no_mangle]
pub unsafe extern "C" fn taco_model_load(
    path: *const c_char,
    out: *mut *mut TacoModel,
) -> TacoStatus {
    if path.is_null() || out.is_null() {
        return TacoStatus::NullArgument;
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return TacoStatus::BadPath;
    };
    match load_checkpoint(Path::new(path)) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(TacoModel { inner: model }));
            TacoStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Releases a handle from [`taco_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be a handle returned by [`taco_model_load`] that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn taco_model_free(model: *mut TacoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reads the model's fixed dimensions.
///
/// # Safety
/// `model` must be a live handle and `info` a writable struct pointer.
#[no_mangle]
pub unsafe extern "C" fn taco_model_info(
    model: *const TacoModel,
    info: *mut TacoModelInfo,
) -> TacoStatus {
    if model.is_null() || info.is_null() {
        return TacoStatus::NullArgument;
    }
    let m = &(*model).inner;
    *info = TacoModelInfo {
        volume_shape: m.grid.volume_shape,
        patch: m.grid.patch,
        token_count: m.grid.token_count(),
        patch_len: m.grid.patch_len(),
        feature_dim: m.config.feature_dim,
        depth: m.config.depth,
        trained_steps: m.step,
    };
    TacoStatus::Ok
}

/// Encodes one volume to token features.
///
/// `voxels` is the full z-major volume (`volume_shape` product values);
/// `features` receives `token_count * feature_dim` values, token-major.
///
/// # Safety
/// `model` must be a live handle; `voxels` must hold `voxels_len` readable
/// values and `features` must hold `features_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn taco_model_encode(
    model: *const TacoModel,
    voxels: *const f64,
    voxels_len: usize,
    features: *mut f64,
    features_len: usize,
) -> TacoStatus {
    if model.is_null() || voxels.is_null() || features.is_null() {
        return TacoStatus::NullArgument;
    }
    let m = &(*model).inner;
    let shape = m.grid.volume_shape;
    let need_in = shape[0] * shape[1] * shape[2];
    let need_out = m.grid.token_count() * m.config.feature_dim;
    if voxels_len != need_in || features_len != need_out {
        return TacoStatus::BadShape;
    }
    let data = std::slice::from_raw_parts(voxels, voxels_len);
    if data.iter().any(|v| !v.is_finite()) {
        return TacoStatus::BadInput;
    }
    let vol = Volume { shape, data: data.to_vec() };
    let tokens = match patchify(&vol, &m.grid) {
        Ok(t) => t,
        Err(e) => return status_of(&e),
    };
    match m.encode_values(&tokens) {
        Ok(z) => {
            std::slice::from_raw_parts_mut(features, features_len).copy_from_slice(&z.data);
            TacoStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Scores alignment between two token feature sets of `k` rows and `f`
/// columns each, row i of one corresponding to row i of the other.
///
/// # Safety
/// `za` and `zb` must each hold `k * f` readable values and `out` must be
/// a writable struct pointer.
#[no_mangle]
pub unsafe extern "C" fn taco_alignment(
    za: *const f64,
    zb: *const f64,
    k: usize,
    f: usize,
    out: *mut TacoAlignment,
) -> TacoStatus {
    if za.is_null() || zb.is_null() || out.is_null() {
        return TacoStatus::NullArgument;
    }
    if k == 0 || f == 0 || k.checked_mul(f).is_none() {
        return TacoStatus::BadShape;
    }
    let a = std::slice::from_raw_parts(za, k * f);
    let b = std::slice::from_raw_parts(zb, k * f);
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return TacoStatus::BadInput;
    }
    let ma = Mat::new(k, f, a.to_vec());
    let mb = Mat::new(k, f, b.to_vec());
    match alignment_metrics(&ma, &mb, None) {
        Ok(r) => {
            *out = TacoAlignment {
                token_count: r.token_count,
                pos_mean: r.pos_cos_dist.mean,
                pos_std: r.pos_cos_dist.std,
                neg_mean: r.neg_cos_dist.mean,
                neg_std: r.neg_cos_dist.std,
                hard_neg_mean: r.hard_neg_cos_dist.mean,
                hard_neg_std: r.hard_neg_cos_dist.std,
                neg_pos_gap: r.neg_pos_gap,
                hard_neg_pos_gap: r.hard_neg_pos_gap,
                top1_retrieval: r.top1_retrieval,
                top5_retrieval: r.top5_retrieval,
                pairwise_rank_acc: r.pairwise_rank_acc,
                mnn_selected_ratio: r.mnn_selected_ratio,
            };
            TacoStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}
