//! C ABI for the semanticfl library.
//!
//! Every function returns an [`SflStatus`]. On failure a message is stored per
//! thread and can be read with [`sfl_last_error`]. Objects are opaque handles
//! created by `*_build`/`*_load` and released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::slice;

use semanticfl::features::{load_store, FeatureStore};
use semanticfl::fl::{fedavg_aggregate, ClientUpdate};
use semanticfl::losses::{contrastive_loss, cross_entropy, kd_loss, prox_term};
use semanticfl::nn::{build_model, load_model, Architecture, BackboneSpec, ClientModel, Tensor};
use semanticfl::partition::{partition, PartitionSpec, Scenario};
use semanticfl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SflStatus {
    Ok = 0,
    InvalidInput = 1,
    Config = 2,
    State = 3,
    Io = 4,
    Format = 5,
    Integrity = 6,
    Provider = 7,
    Diverged = 8,
    NullPointer = 9,
    Infeasible = 10,
    ReducedRank = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// Opaque model handle.
pub struct SflModel {
    inner: ClientModel,
}

/// Opaque feature-store handle.
pub struct SflFeatureStore {
    inner: FeatureStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SflStatus {
    match e {
        Error::InvalidInput(_) => SflStatus::InvalidInput,
        Error::InfeasiblePartition(_) => SflStatus::Infeasible,
        Error::State(_) => SflStatus::State,
        Error::Config(_) | Error::MissingStore { .. } => SflStatus::Config,
        Error::Provider(_) => SflStatus::Provider,
        Error::Integrity(_) => SflStatus::Integrity,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => SflStatus::Format,
        Error::ReducedRank { .. } => SflStatus::ReducedRank,
        Error::TrainingDiverged { .. } => SflStatus::Diverged,
        Error::MissingInputs(_) | Error::Io { .. } => SflStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Small(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SflStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            SflStatus::NullPointer
        }
        Ok(Err(Fail::Small(msg))) => {
            set_error(&msg);
            SflStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic");
            SflStatus::Panic
        }
    }
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidInput(format!("{what} is not valid UTF-8"))))
}

fn need(len: usize, want: usize, what: &str) -> Result<(), Fail> {
    if len < want {
        return Err(Fail::Small(format!("{what} holds {len} values, {want} required")));
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sfl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sfl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `architecture` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfl_model_build(
    architecture: *const c_char,
    num_classes: usize,
    feature_dim: usize,
    seed: u64,
    input_channels: usize,
    input_size: usize,
    out: *mut *mut SflModel,
) -> SflStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let arch: Architecture = c_str(architecture, "architecture")?.parse()?;
        let spec = BackboneSpec::new(arch, num_classes, feature_dim, seed).with_input(input_channels, input_size);
        let model = build_model(&spec)?;
        *out = Box::into_raw(Box::new(SflModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfl_model_load(path: *const c_char, out: *mut *mut SflModel) -> SflStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let model = load_model(&PathBuf::from(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(SflModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sfl_model_save(model: *const SflModel, path: *const c_char) -> SflStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        m.inner.save_checkpoint(&PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sfl_model_free(model: *mut SflModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sfl_model_param_len(model: *const SflModel, out: *mut usize) -> SflStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        *out.as_mut().ok_or(Fail::Null("out"))? = m.inner.param_len();
        Ok(())
    })
}

/// Copies the flat parameter vector into `buf` (`len` >= parameter count).
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sfl_model_get_params(model: *const SflModel, buf: *mut f64, len: usize) -> SflStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let p = m.inner.params();
        need(len, p.len(), "buf")?;
        out_slice(buf, len, "buf")?[..p.len()].copy_from_slice(p);
        Ok(())
    })
}

/// # Safety
/// `params` must point to `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn sfl_model_set_params(model: *mut SflModel, params: *const f64, len: usize) -> SflStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Fail::Null("model"))?;
        m.inner.set_params(in_slice(params, len, "params")?)?;
        Ok(())
    })
}

/// Evaluation-mode forward pass on `batch` NCHW images.
/// Writes `batch x num_classes` logits and `batch x feature_dim` features.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn sfl_model_forward(
    model: *const SflModel,
    input: *const f64,
    batch: usize,
    logits: *mut f64,
    logits_len: usize,
    features: *mut f64,
    features_len: usize,
) -> SflStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let [c, h, w] = m.inner.spec.input_shape();
        let x = Tensor::from_vec([batch, c, h, w], in_slice(input, batch * c * h * w, "input")?.to_vec())?;
        let out = m.inner.forward(&x)?;
        need(logits_len, out.logits.data.len(), "logits")?;
        need(features_len, out.features.data.len(), "features")?;
        out_slice(logits, logits_len, "logits")?[..out.logits.data.len()].copy_from_slice(&out.logits.data);
        out_slice(features, features_len, "features")?[..out.features.data.len()].copy_from_slice(&out.features.data);
        Ok(())
    })
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &'static str) -> Result<Tensor, Fail> {
    Ok(Tensor::matrix(rows, cols, in_slice(p, rows * cols, what)?.to_vec())?)
}

unsafe fn labels_vec(p: *const u32, n: usize) -> Result<Vec<usize>, Fail> {
    Ok(in_slice(p, n, "labels")?.iter().map(|&y| y as usize).collect())
}

/// Mean cross-entropy of `batch x classes` logits.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn sfl_cross_entropy(logits: *const f64, batch: usize, classes: usize, labels: *const u32, out: *mut f64) -> SflStatus {
    guard(|| {
        let v = cross_entropy(&matrix(logits, batch, classes, "logits")?, &labels_vec(labels, batch)?)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// Mean KL(softmax(teacher) || softmax(student)) over `batch x dim` rows.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn sfl_kd_loss(teacher: *const f64, student: *const f64, batch: usize, dim: usize, out: *mut f64) -> SflStatus {
    guard(|| {
        let v = kd_loss(&matrix(teacher, batch, dim, "teacher")?, &matrix(student, batch, dim, "student")?)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// InfoNCE of `batch x dim` features against `classes x dim` text anchors.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn sfl_contrastive_loss(
    features: *const f64,
    batch: usize,
    text: *const f64,
    classes: usize,
    dim: usize,
    labels: *const u32,
    tau: f64,
    out: *mut f64,
) -> SflStatus {
    guard(|| {
        let v = contrastive_loss(
            &matrix(features, batch, dim, "features")?,
            &matrix(text, classes, dim, "text")?,
            &labels_vec(labels, batch)?,
            tau,
        )?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// `(mu / 2) * ||local - global||^2`.
///
/// # Safety
/// Both arrays must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfl_prox_term(local: *const f64, global: *const f64, len: usize, mu: f64, out: *mut f64) -> SflStatus {
    guard(|| {
        let v = prox_term(in_slice(local, len, "local")?, in_slice(global, len, "global")?, mu)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// Sample-weighted average of `clients` parameter vectors stored row-major in
/// `params` (`clients x len`), with sample counts in `counts`.
///
/// # Safety
/// `params` holds `clients * len` doubles, `counts` holds `clients` entries,
/// `out` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfl_fedavg_aggregate(
    params: *const f64,
    counts: *const u64,
    clients: usize,
    len: usize,
    out: *mut f64,
) -> SflStatus {
    guard(|| {
        let p = in_slice(params, clients * len, "params")?;
        let n = in_slice(counts, clients, "counts")?;
        let updates: Vec<ClientUpdate> = (0..clients)
            .map(|k| ClientUpdate {
                client_id: k,
                params: p[k * len..(k + 1) * len].to_vec(),
                num_samples: n[k] as usize,
                loss_trace: Vec::new(),
            })
            .collect();
        let agg = fedavg_aggregate(&updates)?;
        out_slice(out, len, "out")?.copy_from_slice(&agg);
        Ok(())
    })
}

/// Partitions `n` labeled samples. `assignment[i]` receives the client of
/// sample `i`, or -1 when the sample is dropped (long-tail subsampling).
///
/// # Safety
/// `labels` and `assignment` must hold `n` entries; `scenario` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sfl_partition(
    labels: *const u32,
    n: usize,
    scenario: *const c_char,
    num_clients: usize,
    alpha: f64,
    classes_per_client: usize,
    imbalance_ratio: f64,
    seed: u64,
    assignment: *mut i64,
) -> SflStatus {
    guard(|| {
        let labels = labels_vec(labels, n)?;
        let spec = PartitionSpec {
            scenario: c_str(scenario, "scenario")?.parse::<Scenario>()?,
            num_clients,
            alpha,
            classes_per_client,
            imbalance_ratio,
            seed,
        };
        let map = partition(&labels, &spec)?;
        let out = out_slice(assignment, n, "assignment")?;
        out.iter_mut().for_each(|a| *a = -1);
        for (k, idx) in map.client_indices.iter().enumerate() {
            for &i in idx {
                out[i] = k as i64;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sfl_store_load(path: *const c_char, out: *mut *mut SflFeatureStore) -> SflStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let store = load_store(&PathBuf::from(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(SflFeatureStore { inner: store }));
        Ok(())
    })
}

/// # Safety
/// `store` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sfl_store_free(store: *mut SflFeatureStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Feature dimension, sample count, and class count of a store.
///
/// # Safety
/// `store` must come from this library; output pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn sfl_store_shape(
    store: *const SflFeatureStore,
    dim: *mut usize,
    num_samples: *mut usize,
    num_classes: *mut usize,
) -> SflStatus {
    guard(|| {
        let s = &store.as_ref().ok_or(Fail::Null("store"))?.inner;
        if let Some(d) = dim.as_mut() {
            *d = s.dim();
        }
        if let Some(n) = num_samples.as_mut() {
            *n = s.visual.len();
        }
        if let Some(c) = num_classes.as_mut() {
            *c = s.text.num_classes();
        }
        Ok(())
    })
}

/// Visual anchor of dataset sample `sample_id`, widened to double.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfl_store_visual(store: *const SflFeatureStore, sample_id: usize, buf: *mut f64, len: usize) -> SflStatus {
    guard(|| {
        let s = &store.as_ref().ok_or(Fail::Null("store"))?.inner;
        let row = s
            .visual
            .sample_ids
            .iter()
            .position(|&id| id == sample_id)
            .ok_or_else(|| Error::InvalidInput(format!("sample {sample_id} is not in the store")))?;
        need(len, s.dim(), "buf")?;
        let out = out_slice(buf, len, "buf")?;
        for (o, v) in out.iter_mut().zip(s.visual.row(row)) {
            *o = *v as f64;
        }
        Ok(())
    })
}

/// Text anchor of class `class_id`, widened to double.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfl_store_text(store: *const SflFeatureStore, class_id: usize, buf: *mut f64, len: usize) -> SflStatus {
    guard(|| {
        let s = &store.as_ref().ok_or(Fail::Null("store"))?.inner;
        if class_id >= s.text.num_classes() {
            return Err(Error::InvalidInput(format!("class {class_id} outside {} classes", s.text.num_classes())).into());
        }
        need(len, s.dim(), "buf")?;
        let out = out_slice(buf, len, "buf")?;
        for (o, v) in out.iter_mut().zip(s.text.row(class_id)) {
            *o = *v as f64;
        }
        Ok(())
    })
}
