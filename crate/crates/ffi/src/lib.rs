//! C ABI over the quantization pipeline: opaque handles for models,
//! calibration data, and statistics; status codes; a thread-local error
//! message.
//!
//! Ownership: every `mq_*_new`/`_load`/`_generate`/`_collect` function hands
//! back a pointer the caller must release with the matching `mq_*_free`.
//! Strings returned by `mq_version`/`mq_last_error` are borrowed and must
//! not be freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mquant::calib::CalibStats;
use mquant::model::{init_model, MambaModel, ModelConfig};
use mquant::quant::{ActMode, Granularity, QuantConfig};
use mquant::report::{cost_model, CostInputs};
use mquant::transform::{apply_plan, build_plan, equivalence_check, quantize_model, Scheme};
use mquant::Tensor;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MqStatus {
    Ok = 0,
    /// Numerical or model-level failure; see `mq_last_error`.
    ComputeError = 1,
    /// Invalid argument or configuration.
    InvalidArgument = 2,
    /// File I/O or format failure.
    IoError = 3,
    /// A required pointer was null.
    NullPointer = 4,
}

/// Transformation scheme selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MqScheme {
    Rtn = 0,
    Hadamard = 1,
    Klt = 2,
    Full = 3,
}

/// Synthetic calibration distribution.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MqDist {
    Gauss = 0,
    HeavyTail = 1,
}

/// Opaque model handle.
pub struct MqModel(MambaModel);
/// Opaque calibration-data handle (`[batch, tokens, d_model]`).
pub struct MqCalib(Tensor);
/// Opaque statistics handle.
pub struct MqStats(CalibStats);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn classify(err: &mquant::MqError) -> MqStatus {
    use mquant::MqError::*;
    match err {
        Io { .. } | Format { .. } | Json { .. } => MqStatus::IoError,
        InvalidConfig(_) | UnknownTap(_) | UnsupportedHadamardOrder { .. } => {
            MqStatus::InvalidArgument
        }
        _ => MqStatus::ComputeError,
    }
}

fn fail(err: mquant::MqError) -> MqStatus {
    let code = classify(&err);
    set_error(&err.to_string());
    code
}

/// Run a closure, translating panics and errors into status codes.
fn guarded(f: impl FnOnce() -> Result<MqStatus, mquant::MqError>) -> MqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic");
            MqStatus::ComputeError
        }
    }
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, MqStatus> {
    if ptr.is_null() {
        return Err(MqStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(MqStatus::InvalidArgument)
        }
    }
}

macro_rules! nonnull {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_error("null pointer argument");
            return MqStatus::NullPointer;
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Borrowed; valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a deterministic model.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn mq_model_init(
    d_model: usize,
    d_inner: usize,
    d_state: usize,
    d_conv: usize,
    dt_rank: usize,
    n_blocks: usize,
    seed: u64,
    outlier_frac: f64,
    outlier_gain: f64,
    out: *mut *mut MqModel,
) -> MqStatus {
    nonnull!(out);
    guarded(|| {
        let mut cfg = ModelConfig::new(d_model, d_inner, d_state, d_conv, dt_rank, n_blocks, seed);
        cfg.outlier_frac = outlier_frac;
        cfg.outlier_gain = outlier_gain;
        let model = init_model(&cfg)?;
        *out = Box::into_raw(Box::new(MqModel(model)));
        Ok(MqStatus::Ok)
    })
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_model_load(path: *const c_char, out: *mut *mut MqModel) -> MqStatus {
    nonnull!(out);
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        let model = mquant::io::read_model(path)?;
        *out = Box::into_raw(Box::new(MqModel(model)));
        Ok(MqStatus::Ok)
    })
}

/// Save a model checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mq_model_save(model: *const MqModel, path: *const c_char) -> MqStatus {
    nonnull!(model);
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        mquant::io::write_model(path, &(*model).0)?;
        Ok(MqStatus::Ok)
    })
}

/// Release a model handle.
///
/// # Safety
/// `model` must have come from this library and not been freed already.
#[no_mangle]
pub unsafe extern "C" fn mq_model_free(model: *mut MqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Report a model's dimensions. Null outputs are skipped.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mq_model_dims(
    model: *const MqModel,
    d_model: *mut usize,
    d_inner: *mut usize,
    d_state: *mut usize,
    n_blocks: *mut usize,
) -> MqStatus {
    nonnull!(model);
    let cfg = &(*model).0.config;
    if !d_model.is_null() {
        *d_model = cfg.d_model;
    }
    if !d_inner.is_null() {
        *d_inner = cfg.d_inner;
    }
    if !d_state.is_null() {
        *d_state = cfg.d_state;
    }
    if !n_blocks.is_null() {
        *n_blocks = cfg.n_blocks;
    }
    MqStatus::Ok
}

/// Synthesize calibration data for a model width.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_calib_generate(
    d_model: usize,
    batch: usize,
    tokens: usize,
    seed: u64,
    dist: MqDist,
    out: *mut *mut MqCalib,
) -> MqStatus {
    nonnull!(out);
    if batch == 0 || tokens == 0 || d_model == 0 {
        set_error("batch, tokens, and d_model must be positive");
        return MqStatus::InvalidArgument;
    }
    guarded(|| {
        let data = mquant::cli::generate_calib(
            d_model,
            batch,
            tokens,
            seed,
            dist == MqDist::HeavyTail,
        );
        *out = Box::into_raw(Box::new(MqCalib(data)));
        Ok(MqStatus::Ok)
    })
}

/// Load a calibration-data file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mq_calib_load(path: *const c_char, out: *mut *mut MqCalib) -> MqStatus {
    nonnull!(out);
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        let data = mquant::io::read_calib(path)?;
        *out = Box::into_raw(Box::new(MqCalib(data)));
        Ok(MqStatus::Ok)
    })
}

/// Save calibration data.
///
/// # Safety
/// `calib` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mq_calib_save(calib: *const MqCalib, path: *const c_char) -> MqStatus {
    nonnull!(calib);
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| {
        mquant::io::write_calib(path, &(*calib).0)?;
        Ok(MqStatus::Ok)
    })
}

/// Release a calibration handle.
///
/// # Safety
/// `calib` must have come from this library and not been freed already.
#[no_mangle]
pub unsafe extern "C" fn mq_calib_free(calib: *mut MqCalib) {
    if !calib.is_null() {
        drop(Box::from_raw(calib));
    }
}

/// Collect per-tap statistics for a model over calibration data.
///
/// # Safety
/// `model` and `calib` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mq_stats_collect(
    model: *const MqModel,
    calib: *const MqCalib,
    out: *mut *mut MqStats,
) -> MqStatus {
    nonnull!(model);
    nonnull!(calib);
    nonnull!(out);
    guarded(|| {
        use mquant::model::Tap;
        let taps = [
            Tap::ResidStream,
            Tap::LoraMid,
            Tap::GateOut,
            Tap::OutprojIn,
            Tap::MatmulH,
            Tap::MatmulC,
            Tap::PscanIn,
            Tap::PscanOut,
        ];
        let stats = mquant::calib::collect_stats(&(*model).0, &(*calib).0, &taps)?;
        *out = Box::into_raw(Box::new(MqStats(stats)));
        Ok(MqStatus::Ok)
    })
}

/// Release a statistics handle.
///
/// # Safety
/// `stats` must have come from this library and not been freed already.
#[no_mangle]
pub unsafe extern "C" fn mq_stats_free(stats: *mut MqStats) {
    if !stats.is_null() {
        drop(Box::from_raw(stats));
    }
}

/// Apply a transformation scheme, producing a new model handle.
///
/// # Safety
/// `model` and `stats` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mq_transform(
    model: *const MqModel,
    stats: *const MqStats,
    scheme: MqScheme,
    out: *mut *mut MqModel,
) -> MqStatus {
    nonnull!(model);
    nonnull!(stats);
    nonnull!(out);
    guarded(|| {
        let scheme = match scheme {
            MqScheme::Rtn => Scheme::Rtn,
            MqScheme::Hadamard => Scheme::Hadamard,
            MqScheme::Klt => Scheme::Klt,
            MqScheme::Full => Scheme::Full,
        };
        let plan = build_plan(&(*model).0, &(*stats).0, scheme)?;
        let tm = apply_plan(&(*model).0, &plan)?;
        *out = Box::into_raw(Box::new(MqModel(tm)));
        Ok(MqStatus::Ok)
    })
}

/// Fake-quantize weights and attach activation quantization.
///
/// `stats` may be null for dynamic activation mode; static mode requires
/// statistics collected on `model` itself.
///
/// # Safety
/// `model` must be a live handle; `stats` live or null; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mq_quantize(
    model: *const MqModel,
    stats: *const MqStats,
    bits_w: u32,
    bits_a: u32,
    weights_per_channel: bool,
    activations_dynamic: bool,
    out: *mut *mut MqModel,
) -> MqStatus {
    nonnull!(model);
    nonnull!(out);
    guarded(|| {
        let mut qcfg = QuantConfig::new(bits_w, bits_a);
        qcfg.w_granularity = if weights_per_channel {
            Granularity::PerChannel
        } else {
            Granularity::PerTensor
        };
        qcfg.a_mode = if activations_dynamic { ActMode::Dynamic } else { ActMode::Static };
        qcfg.a_granularity = if activations_dynamic {
            Granularity::PerToken
        } else {
            Granularity::PerTensor
        };
        let stats_ref = if stats.is_null() { None } else { Some(&(*stats).0) };
        let qm = quantize_model(&(*model).0, &qcfg, stats_ref)?;
        *out = Box::into_raw(Box::new(MqModel(qm)));
        Ok(MqStatus::Ok)
    })
}

/// Run a `[tokens, d_model]` row-major input through a model.
///
/// # Safety
/// `input` and `output` must each point to `tokens * d_model` doubles.
#[no_mangle]
pub unsafe extern "C" fn mq_forward(
    model: *const MqModel,
    input: *const f64,
    tokens: usize,
    output: *mut f64,
) -> MqStatus {
    nonnull!(model);
    nonnull!(input);
    nonnull!(output);
    guarded(|| {
        let d = (*model).0.config.d_model;
        let data = std::slice::from_raw_parts(input, tokens * d).to_vec();
        let x = Tensor::from_vec(vec![tokens, d], data)?;
        let y = (*model).0.forward(&x)?;
        std::ptr::copy_nonoverlapping(y.data().as_ptr(), output, tokens * d);
        Ok(MqStatus::Ok)
    })
}

/// Compare two models on calibration data.
///
/// # Safety
/// Handles must be live; non-null result pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_equivalence(
    model_a: *const MqModel,
    model_b: *const MqModel,
    probe: *const MqCalib,
    max_abs: *mut f64,
    max_rel: *mut f64,
    cosine: *mut f64,
) -> MqStatus {
    nonnull!(model_a);
    nonnull!(model_b);
    nonnull!(probe);
    guarded(|| {
        let shape = (*probe).0.shape().to_vec();
        let flat = Tensor::from_vec(
            vec![shape[0] * shape[1], shape[2]],
            (*probe).0.data().to_vec(),
        )?;
        let rep = equivalence_check(&(*model_a).0, &(*model_b).0, &flat)?;
        if !max_abs.is_null() {
            *max_abs = rep.max_abs;
        }
        if !max_rel.is_null() {
            *max_rel = rep.max_rel;
        }
        if !cosine.is_null() {
            *cosine = rep.cosine;
        }
        Ok(MqStatus::Ok)
    })
}

/// Parameter and FLOP overhead (percent) of the fused transforms.
///
/// # Safety
/// Non-null result pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mq_cost_model(
    d_inner: usize,
    d_state: usize,
    n_blocks: usize,
    n_tokens: usize,
    base_params: f64,
    base_flops: f64,
    param_overhead_pct: *mut f64,
    flop_overhead_pct: *mut f64,
) -> MqStatus {
    guarded(|| {
        let c = cost_model(&CostInputs {
            d_inner,
            d_state,
            n_blocks,
            n_tokens,
            base_params,
            base_flops,
        })?;
        if !param_overhead_pct.is_null() {
            *param_overhead_pct = c.param_overhead_pct;
        }
        if !flop_overhead_pct.is_null() {
            *flop_overhead_pct = c.flop_overhead_pct;
        }
        Ok(MqStatus::Ok)
    })
}
