//! C ABI over the core library: opaque dataset/checkpoint handles, status
//! codes, and a thread-local last-error string. The generated header lands
//! in include/mml.h.
//!
//! Ownership rules: any handle returned through an out-pointer is owned by
//! the caller and must be released with the matching `_free` function.
//! Strings returned by `mml_version`/`mml_last_error` are borrowed and must
//! not be freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use mml_core::datagen::{gen_longtail, load_dataset, save_dataset, Dataset, SyntheticSpec};
use mml_core::error::MmlError;
use mml_core::numeric::Matrix;
use mml_core::trainer::{train, Checkpoint, TrainConfig};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmlStatus {
    Ok = 0,
    NullPointer = 1,
    Utf8Error = 2,
    ConfigError = 3,
    DataError = 4,
    Divergence = 5,
    IoError = 6,
}

/// Opaque dataset handle.
pub struct MmlDataset {
    inner: Dataset,
}

/// Opaque trained-model handle.
pub struct MmlCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &MmlError) -> MmlStatus {
    match err {
        MmlError::Config(_)
        | MmlError::InvalidArgument(_)
        | MmlError::DimensionMismatch(_)
        | MmlError::IncompatibleCheckpoint(_) => MmlStatus::ConfigError,
        MmlError::Data(_)
        | MmlError::MalformedRecord { .. }
        | MmlError::LabelOutOfRange { .. }
        | MmlError::ZeroNormRow { .. } => MmlStatus::DataError,
        MmlError::Divergence { .. } | MmlError::NonFinite(_) => MmlStatus::Divergence,
        MmlError::Io(_) => MmlStatus::IoError,
    }
}

fn fail(err: &MmlError) -> MmlStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn c_str<'a>(ptr: *const c_char) -> Result<&'a str, MmlStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(MmlStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        MmlStatus::Utf8Error
    })
}

/// Crate version as a static string.
#[no_mangle]
pub extern "C" fn mml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread; empty if none.
/// Borrowed; valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mml_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generate a long-tailed synthetic dataset from a TOML spec (the fields of
/// the config file's `[data]` section).
///
/// # Safety
/// `spec_toml` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn mml_dataset_generate(
    spec_toml: *const c_char,
    out: *mut *mut MmlDataset,
) -> MmlStatus {
    if out.is_null() {
        set_error("null out pointer");
        return MmlStatus::NullPointer;
    }
    let text = match c_str(spec_toml) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let spec: SyntheticSpec = match toml::from_str(text) {
        Ok(s) => s,
        Err(e) => {
            set_error(&format!("spec parse error: {e}"));
            return MmlStatus::ConfigError;
        }
    };
    if let Err(e) = spec.validate() {
        return fail(&e);
    }
    match gen_longtail(&spec) {
        Ok(dataset) => {
            *out = Box::into_raw(Box::new(MmlDataset { inner: dataset }));
            MmlStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Load a JSON-Lines dataset file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn mml_dataset_load(
    path: *const c_char,
    out: *mut *mut MmlDataset,
) -> MmlStatus {
    if out.is_null() {
        set_error("null out pointer");
        return MmlStatus::NullPointer;
    }
    let path = match c_str(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_dataset(Path::new(path)) {
        Ok(dataset) => {
            *out = Box::into_raw(Box::new(MmlDataset { inner: dataset }));
            MmlStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Write a dataset back out as JSON-Lines.
///
/// # Safety
/// `dataset` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn mml_dataset_save(
    dataset: *const MmlDataset,
    path: *const c_char,
) -> MmlStatus {
    let Some(dataset) = dataset.as_ref() else {
        set_error("null dataset handle");
        return MmlStatus::NullPointer;
    };
    let path = match c_str(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match save_dataset(&dataset.inner, Path::new(path)) {
        Ok(()) => MmlStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mml_dataset_len(dataset: *const MmlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Number of classes; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mml_dataset_num_classes(dataset: *const MmlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.num_classes())
}

/// Input dimensionality; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mml_dataset_free(dataset: *mut MmlDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Train on a dataset. `config_toml` holds the fields of the config file's
/// `[train]` section plus a nested `model` table (the `[model]` section).
///
/// # Safety
/// `config_toml` must be a valid string, `dataset` a live handle, `out` a
/// valid slot.
#[no_mangle]
pub unsafe extern "C" fn mml_train(
    config_toml: *const c_char,
    dataset: *const MmlDataset,
    out: *mut *mut MmlCheckpoint,
) -> MmlStatus {
    if out.is_null() {
        set_error("null out pointer");
        return MmlStatus::NullPointer;
    }
    let Some(dataset) = dataset.as_ref() else {
        set_error("null dataset handle");
        return MmlStatus::NullPointer;
    };
    let text = match c_str(config_toml) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let config: TrainConfig = match toml::from_str(text) {
        Ok(c) => c,
        Err(e) => {
            set_error(&format!("config parse error: {e}"));
            return MmlStatus::ConfigError;
        }
    };
    if let Err(e) = config.validate() {
        return fail(&e);
    }
    match train(config, &dataset.inner) {
        Ok((checkpoint, _trace)) => {
            *out = Box::into_raw(Box::new(MmlCheckpoint { inner: checkpoint }));
            MmlStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Persist a checkpoint as JSON.
///
/// # Safety
/// `checkpoint` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn mml_checkpoint_save(
    checkpoint: *const MmlCheckpoint,
    path: *const c_char,
) -> MmlStatus {
    let Some(checkpoint) = checkpoint.as_ref() else {
        set_error("null checkpoint handle");
        return MmlStatus::NullPointer;
    };
    let path = match c_str(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match checkpoint.inner.save(Path::new(path)) {
        Ok(()) => MmlStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Load a checkpoint from JSON.
///
/// # Safety
/// `path` must be a valid string; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn mml_checkpoint_load(
    path: *const c_char,
    out: *mut *mut MmlCheckpoint,
) -> MmlStatus {
    if out.is_null() {
        set_error("null out pointer");
        return MmlStatus::NullPointer;
    }
    let path = match c_str(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match Checkpoint::load(Path::new(path)) {
        Ok(checkpoint) => {
            *out = Box::into_raw(Box::new(MmlCheckpoint { inner: checkpoint }));
            MmlStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Embedding dimensionality of the checkpoint's backbone; 0 for null or an
/// unreadable checkpoint.
///
/// # Safety
/// `checkpoint` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mml_checkpoint_embed_dim(checkpoint: *const MmlCheckpoint) -> usize {
    checkpoint
        .as_ref()
        .and_then(|c| c.inner.embedder_params().ok())
        .map_or(0, |p| p.embed_dim())
}

/// # Safety
/// `checkpoint` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mml_checkpoint_free(checkpoint: *mut MmlCheckpoint) {
    if !checkpoint.is_null() {
        drop(Box::from_raw(checkpoint));
    }
}

/// Run the backbone over `rows` input vectors of length `input_dim`, laid
/// out row-major in `inputs`. Writes `rows * embed_dim` values into `out`,
/// row-major. `out_len` must be at least that large.
///
/// # Safety
/// `checkpoint` must be a live handle; `inputs` valid for `rows * input_dim`
/// reads; `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn mml_embed(
    checkpoint: *const MmlCheckpoint,
    inputs: *const f64,
    rows: usize,
    input_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> MmlStatus {
    let Some(checkpoint) = checkpoint.as_ref() else {
        set_error("null checkpoint handle");
        return MmlStatus::NullPointer;
    };
    if inputs.is_null() || out.is_null() {
        set_error("null buffer");
        return MmlStatus::NullPointer;
    }
    let params = match checkpoint.inner.embedder_params() {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    if input_dim != params.input_dim() {
        set_error(&format!(
            "input_dim {input_dim} does not match model input_dim {}",
            params.input_dim()
        ));
        return MmlStatus::ConfigError;
    }
    let needed = rows * params.embed_dim();
    if out_len < needed {
        set_error(&format!("out buffer holds {out_len} values, need {needed}"));
        return MmlStatus::ConfigError;
    }
    let data = std::slice::from_raw_parts(inputs, rows * input_dim);
    let matrix = match Matrix::from_vec(rows, input_dim, data.to_vec()) {
        Ok(m) => m,
        Err(e) => return fail(&e),
    };
    match params.forward(&matrix) {
        Ok(embeddings) => {
            ptr::copy_nonoverlapping(embeddings.data().as_ptr(), out, needed);
            MmlStatus::Ok
        }
        Err(e) => fail(&e),
    }
}
