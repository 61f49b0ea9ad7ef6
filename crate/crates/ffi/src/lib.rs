//! C interface to the metalora trainer.
//!
//! Every fallible call returns an [`MloraStatus`]; on anything other than
//! `MLORA_STATUS_OK` the calling thread's message is available from
//! [`mlora_last_error_message`]. Handles are opaque and owned by the caller
//! once returned; release them with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use metalora::gradcheck;
use metalora::harness::{evaluate_adapter, prepare, train_to_dir, HarnessError, Preset, RunConfig};
use metalora::lora::AdapterSet;
use metalora::meta::MetaError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MloraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    Io = 4,
    Adapter = 5,
    Diverged = 6,
    GradcheckFailed = 7,
    Failed = 8,
    Panic = 9,
}

/// A run configuration.
pub struct MloraConfig {
    inner: RunConfig,
}

/// A set of trained or loaded adapters.
pub struct MloraAdapter {
    inner: AdapterSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MloraStatus, String);

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let status = match &e {
            HarnessError::Config(_) | HarnessError::Meta(MetaError::Config(_)) => MloraStatus::InvalidConfig,
            HarnessError::Io { .. } => MloraStatus::Io,
            HarnessError::Meta(MetaError::Diverged { .. }) => MloraStatus::Diverged,
            HarnessError::Lora(_) | HarnessError::Meta(MetaError::Lora(_)) => MloraStatus::Adapter,
            HarnessError::GradcheckFailed(_) => MloraStatus::GradcheckFailed,
            _ => MloraStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MloraStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MloraStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            MloraStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MloraStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(MloraStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version, a static nul-terminated string.
#[no_mangle]
pub extern "C" fn mlora_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn mlora_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses a JSON run configuration.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mlora_config_from_json(json: *const c_char, out: *mut *mut MloraConfig) -> MloraStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let cfg = RunConfig::from_json(text(json, "json")?)?;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(MloraConfig { inner: cfg }));
        Ok(())
    })
}

/// Built-in configuration: `"sinusoid"`, `"low-rank"` or `"sequence"`.
///
/// # Safety
/// `name` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mlora_config_preset(name: *const c_char, out: *mut *mut MloraConfig) -> MloraStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let preset = match text(name, "name")? {
            "sinusoid" => Preset::Sinusoid,
            "low-rank" | "low_rank" => Preset::LowRank,
            "sequence" => Preset::Sequence,
            other => {
                return Err(Failure(
                    MloraStatus::InvalidConfig,
                    format!("unknown preset {other:?} (sinusoid, low-rank, sequence)"),
                ))
            }
        };
        let cfg = RunConfig::preset(preset).normalized();
        *out = Box::into_raw(Box::new(MloraConfig { inner: cfg }));
        Ok(())
    })
}

/// Sets the training seed.
///
/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn mlora_config_set_seed(config: *mut MloraConfig, seed: u64) -> MloraStatus {
    guard(|| {
        handle_mut(config, "config")?.inner.meta.seed = seed;
        Ok(())
    })
}

/// Sets the number of outer iterations.
///
/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn mlora_config_set_iterations(config: *mut MloraConfig, iterations: u64) -> MloraStatus {
    guard(|| {
        handle_mut(config, "config")?.inner.meta.iterations = iterations;
        Ok(())
    })
}

/// Serializes the configuration; free the result with [`mlora_string_free`].
///
/// # Safety
/// `config` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mlora_config_to_json(config: *const MloraConfig, out: *mut *mut c_char) -> MloraStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let json = handle(config, "config")?.inner.to_json();
        *out = CString::new(json).expect("json has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn mlora_config_free(config: *mut MloraConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn mlora_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Trains per `config`, writing adapter, metrics and summary into `out_dir`
/// (the config's output directory when null). `out_adapter` and
/// `out_examples` may be null.
///
/// # Safety
/// Pointers must be valid or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn mlora_train(
    config: *const MloraConfig,
    out_dir: *const c_char,
    out_adapter: *mut *mut MloraAdapter,
    out_examples: *mut u64,
) -> MloraStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.inner;
        let p = prepare(cfg)?;
        let dir = if out_dir.is_null() {
            p.config.output_dir.clone()
        } else {
            PathBuf::from(text(out_dir, "out_dir")?)
        };
        let (summary, adapters) = train_to_dir(&p, &dir)?;
        if let Some(n) = out_examples.as_mut() {
            *n = summary.examples_consumed;
        }
        if let Some(slot) = out_adapter.as_mut() {
            *slot = Box::into_raw(Box::new(MloraAdapter { inner: adapters }));
        }
        Ok(())
    })
}

/// Mean and sample standard deviation over evaluation seeds of the held-out
/// post-adaptation query loss. `out_sd` may be null.
///
/// # Safety
/// Pointers must be valid or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn mlora_evaluate(
    config: *const MloraConfig,
    adapter: *const MloraAdapter,
    out_mean: *mut f64,
    out_sd: *mut f64,
) -> MloraStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.inner;
        let adapters = &handle(adapter, "adapter")?.inner;
        let out_mean = handle_mut(out_mean, "out_mean")?;
        let p = prepare(cfg)?;
        let report = evaluate_adapter(&p, adapters, "adapter", 0)?;
        *out_mean = report.mean_query_mse;
        if let Some(sd) = out_sd.as_mut() {
            *sd = report.sd_query_mse;
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mlora_adapter_load(path: *const c_char, out: *mut *mut MloraAdapter) -> MloraStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        let set = AdapterSet::load(PathBuf::from(text(path, "path")?).as_path()).map_err(HarnessError::from)?;
        *out = Box::into_raw(Box::new(MloraAdapter { inner: set }));
        Ok(())
    })
}

/// # Safety
/// `adapter` must come from this library and `path` be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mlora_adapter_save(adapter: *const MloraAdapter, path: *const c_char) -> MloraStatus {
    guard(|| {
        let set = &handle(adapter, "adapter")?.inner;
        set.save(PathBuf::from(text(path, "path")?).as_path())
            .map_err(HarnessError::from)?;
        Ok(())
    })
}

/// Number of trainable scalars, 0 for a null handle.
///
/// # Safety
/// `adapter` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn mlora_adapter_param_count(adapter: *const MloraAdapter) -> usize {
    adapter.as_ref().map_or(0, |a| a.inner.trainable_count())
}

/// # Safety
/// `adapter` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn mlora_adapter_free(adapter: *mut MloraAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// Runs the finite-difference check of every primitive and loss.
/// `out_failed` (may be null) receives the number of failing cases.
///
/// # Safety
/// `out_failed` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn mlora_gradcheck(seed: u64, out_failed: *mut u32) -> MloraStatus {
    guard(|| {
        let report = gradcheck::run_gradcheck(seed);
        let failures = report.failures();
        if let Some(n) = out_failed.as_mut() {
            *n = failures.len() as u32;
        }
        if failures.is_empty() {
            Ok(())
        } else {
            let names: Vec<&str> = failures.iter().map(|f| f.name.as_str()).collect();
            Err(HarnessError::GradcheckFailed(names.join(", ")).into())
        }
    })
}
