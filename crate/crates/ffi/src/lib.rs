//! C ABI over the `imse` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new`,
//! `*_build`, `*_load` or `*_restore` functions and released by the
//! matching `*_free`. Every fallible call returns an [`ImseStatus`]; on
//! failure [`imse_last_error`] describes the problem for the calling
//! thread. Images are `float` pixels in `[0, 1]`, laid out as
//! `[batch, channels, height, width]`. Models run in single precision.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use imse::adapt::{adapt_step, trainable_entries, Adam, AdaptConfig, Mode};
use imse::bank::{distance, DomainBank};
use imse::harness::data::PIXELS;
use imse::harness::to_tensor;
use imse::model::{load_checkpoint, save_checkpoint, Trainability, ViTConfig, VisionTransformer};
use imse::spectral::{CodeHolder, SpectralCode};
use imse::tensor::Tensor;
use imse::Error;

type Model = VisionTransformer<f32>;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    NoConvergence = 5,
    LayerMismatch = 6,
    Format = 7,
    Diverged = 8,
    Io = 9,
    Config = 10,
    Panic = 11,
}

impl From<&Error> for ImseStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => Self::Shape,
            Error::InvalidArgument(_) => Self::InvalidArgument,
            Error::InvalidConfig { .. } | Error::Config(_) => Self::Config,
            Error::NonFinite(_) => Self::NonFinite,
            Error::NoConvergence { .. } => Self::NoConvergence,
            Error::LayerMismatch { .. } => Self::LayerMismatch,
            Error::Format { .. } => Self::Format,
            Error::Diverged { .. } => Self::Diverged,
            Error::Io { .. } | Error::Csv(_) => Self::Io,
        }
    }
}

/// Opaque vision transformer.
pub struct ImseModel(Model);

/// Opaque adaptation session: a model, its source code and optimizer.
pub struct ImseAdapter {
    model: Model,
    source: SpectralCode,
    cfg: AdaptConfig,
    opt: Adam,
}

/// Opaque domain bank.
pub struct ImseBank(DomainBank);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct ImseModelInfo {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub is_decomposed: bool,
    /// Singular values adaptation may change.
    pub trainable: usize,
    /// Scalars of the equivalent dense model.
    pub dense_parameters: usize,
}

/// Adaptation settings. `mode` is 0 for the combined objective, 1 for
/// entropy only and 2 for diversity only.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct ImseAdaptParams {
    pub lambda_dm: f64,
    pub entropy_margin_factor: f64,
    pub learning_rate: f64,
    pub sam_rho: f64,
    pub mode: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct ImseStepReport {
    pub entmin: f64,
    pub dm: f64,
    pub combined: f64,
    pub kept_samples: usize,
    pub batch_size: usize,
    pub noop: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), ImseStatus>) -> ImseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ImseStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            ImseStatus::Panic
        }
    }
}

fn fail(e: Error) -> ImseStatus {
    set_error(&e.to_string());
    ImseStatus::from(&e)
}

fn null(what: &str) -> ImseStatus {
    set_error(&format!("null pointer: {what}"));
    ImseStatus::NullPointer
}

fn invalid(msg: &str) -> ImseStatus {
    set_error(msg);
    ImseStatus::InvalidArgument
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, ImseStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, ImseStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, ImseStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), ImseStatus> {
    let slot = deref_mut(out, "output handle")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn images(model: &Model, pixels: *const f32, batch: usize) -> Result<Tensor<f32>, ImseStatus> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    if batch == 0 {
        return Err(invalid("batch must be positive"));
    }
    let c = model.config();
    let per = c.channels * c.image_size * c.image_size;
    if per != PIXELS {
        return Err(invalid("model geometry differs from the 3x32x32 image format"));
    }
    let data = std::slice::from_raw_parts(pixels, batch * per);
    Ok(to_tensor(data.chunks_exact(per)))
}

/// Message of the calling thread's last failure, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn imse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn imse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a dense model with the default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn imse_model_build(seed: u64, out: *mut *mut ImseModel) -> ImseStatus {
    guard(|| {
        let m = Model::build(ViTConfig::default(), seed).map_err(fail)?;
        store(out, ImseModel(m))
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imse_model_load(path: *const c_char, out: *mut *mut ImseModel) -> ImseStatus {
    guard(|| {
        let m: Model = load_checkpoint(path_arg(path)?).map_err(fail)?;
        store(out, ImseModel(m))
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn imse_model_save(model: *const ImseModel, path: *const c_char) -> ImseStatus {
    guard(|| save_checkpoint(&deref(model, "model")?.0, path_arg(path)?).map_err(fail))
}

/// Factorizes every spectral target of a dense model into a new handle.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imse_model_decompose(model: *const ImseModel, out: *mut *mut ImseModel) -> ImseStatus {
    guard(|| {
        let m = deref(model, "model")?.0.decompose().map_err(fail)?;
        store(out, ImseModel(m))
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imse_model_info(model: *const ImseModel, out: *mut ImseModelInfo) -> ImseStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let mut probe = m.clone();
        probe.set_trainability(Trainability::Spectral);
        let c = m.config();
        *deref_mut(out, "info")? = ImseModelInfo {
            image_size: c.image_size,
            channels: c.channels,
            num_classes: c.num_classes,
            is_decomposed: m.is_decomposed(),
            trainable: probe.trainable_count(),
            dense_parameters: m.dense_parameter_count(),
        };
        Ok(())
    })
}

/// Class logits, row-major `[batch, num_classes]`.
///
/// # Safety
/// `pixels` must hold `batch` images and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn imse_model_logits(
    model: *const ImseModel,
    pixels: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> ImseStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let x = images(m, pixels, batch)?;
        let logits = m.forward(&x).map_err(fail)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != logits.numel() {
            return Err(invalid(&format!("out_len must be {}", logits.numel())));
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(logits.data());
        Ok(())
    })
}

/// Argmax class per image.
///
/// # Safety
/// `pixels` must hold `batch` images and `labels` `batch` entries.
#[no_mangle]
pub unsafe extern "C" fn imse_model_predict(
    model: *const ImseModel,
    pixels: *const f32,
    batch: usize,
    labels: *mut usize,
) -> ImseStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let x = images(m, pixels, batch)?;
        let pred = m.predict(&x).map_err(fail)?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        std::slice::from_raw_parts_mut(labels, batch).copy_from_slice(&pred);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imse_model_free(model: *mut ImseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fills `out` with the default adaptation settings.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imse_adapt_params_default(out: *mut ImseAdaptParams) -> ImseStatus {
    guard(|| {
        let d = AdaptConfig::default();
        *deref_mut(out, "params")? = ImseAdaptParams {
            lambda_dm: d.lambda_dm,
            entropy_margin_factor: d.entropy_margin_factor,
            learning_rate: d.learning_rate,
            sam_rho: d.sam_rho,
            mode: 0,
        };
        Ok(())
    })
}

/// Starts an adaptation session on a copy of a decomposed model.
///
/// # Safety
/// `model` must be a live handle, `params` null (defaults) or readable,
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imse_adapter_new(
    model: *const ImseModel,
    params: *const ImseAdaptParams,
    out: *mut *mut ImseAdapter,
) -> ImseStatus {
    guard(|| {
        let mut m = deref(model, "model")?.0.clone();
        if !m.is_decomposed() {
            return Err(invalid("adaptation needs a decomposed model"));
        }
        let mut cfg = AdaptConfig::default();
        if let Some(p) = params.as_ref() {
            cfg.lambda_dm = p.lambda_dm;
            cfg.entropy_margin_factor = p.entropy_margin_factor;
            cfg.learning_rate = p.learning_rate;
            cfg.sam_rho = p.sam_rho;
            cfg.mode = match p.mode {
                0 => Mode::Imse,
                1 => Mode::EntminOnly,
                2 => Mode::DmOnly,
                _ => return Err(invalid("mode must be 0, 1 or 2")),
            };
        }
        cfg.validate().map_err(fail)?;
        m.set_trainability(Trainability::Spectral);
        m.set_masks(cfg.mask_strategy, cfg.mask_r).map_err(fail)?;
        let opt = cfg.new_optimizer(trainable_entries(&m).len());
        let source = m.extract_code();
        store(
            out,
            ImseAdapter {
                model: m,
                source,
                cfg,
                opt,
            },
        )
    })
}

/// One adaptation step. Predictions and losses come from the forward
/// before the update. `predictions` and `report` may be null.
///
/// # Safety
/// `pixels` must hold `batch` images, `predictions` `batch` entries.
#[no_mangle]
pub unsafe extern "C" fn imse_adapter_step(
    adapter: *mut ImseAdapter,
    pixels: *const f32,
    batch: usize,
    predictions: *mut usize,
    report: *mut ImseStepReport,
) -> ImseStatus {
    guard(|| {
        let a = deref_mut(adapter, "adapter")?;
        let x = images(&a.model, pixels, batch)?;
        let r = adapt_step(&mut a.model, &x, &a.cfg, &mut a.opt).map_err(fail)?;
        if !predictions.is_null() {
            std::slice::from_raw_parts_mut(predictions, batch).copy_from_slice(&r.predictions);
        }
        if let Some(out) = report.as_mut() {
            *out = ImseStepReport {
                entmin: r.entmin,
                dm: r.dm,
                combined: r.combined,
                kept_samples: r.kept_samples,
                batch_size: r.batch_size,
                noop: r.noop,
            };
        }
        Ok(())
    })
}

/// Restores the source singular values and clears the optimizer.
///
/// # Safety
/// `adapter` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn imse_adapter_reset(adapter: *mut ImseAdapter) -> ImseStatus {
    guard(|| {
        let a = deref_mut(adapter, "adapter")?;
        a.model.load_code(&a.source).map_err(fail)?;
        a.opt.reset();
        Ok(())
    })
}

/// Copies the adapted model into a new handle.
///
/// # Safety
/// `adapter` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imse_adapter_model(adapter: *const ImseAdapter, out: *mut *mut ImseModel) -> ImseStatus {
    guard(|| {
        let m = deref(adapter, "adapter")?.model.clone();
        store(out, ImseModel(m))
    })
}

/// # Safety
/// `adapter` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imse_adapter_free(adapter: *mut ImseAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// Reads a persisted domain bank.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imse_bank_restore(path: *const c_char, out: *mut *mut ImseBank) -> ImseStatus {
    guard(|| {
        let b = DomainBank::restore(path_arg(path)?).map_err(fail)?;
        store(out, ImseBank(b))
    })
}

/// # Safety
/// `bank` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn imse_bank_persist(bank: *const ImseBank, path: *const c_char) -> ImseStatus {
    guard(|| deref(bank, "bank")?.0.persist(path_arg(path)?).map_err(fail))
}

/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imse_bank_len(bank: *const ImseBank, out: *mut usize) -> ImseStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(bank, "bank")?.0.len();
        Ok(())
    })
}

/// Symmetric KL distance between the descriptors of entries `i` and `j`.
///
/// # Safety
/// `bank` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imse_bank_distance(bank: *const ImseBank, i: usize, j: usize, out: *mut f64) -> ImseStatus {
    guard(|| {
        let e = deref(bank, "bank")?.0.entries();
        if i >= e.len() || j >= e.len() {
            return Err(invalid(&format!("entry index out of range (bank has {})", e.len())));
        }
        *deref_mut(out, "out")? = distance(&e[i].descriptor, &e[j].descriptor).map_err(fail)?;
        Ok(())
    })
}

/// Loads entry `i`'s singular values into an adapter's model.
///
/// # Safety
/// `bank` and `adapter` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn imse_bank_load_entry(bank: *const ImseBank, i: usize, adapter: *mut ImseAdapter) -> ImseStatus {
    guard(|| {
        let e = deref(bank, "bank")?.0.entries();
        let a = deref_mut(adapter, "adapter")?;
        let entry = e.get(i).ok_or_else(|| invalid("entry index out of range"))?;
        a.model.load_code(&entry.code).map_err(fail)?;
        a.opt.reset();
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imse_bank_free(bank: *mut ImseBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}
