//! C ABI over the `fedhyp` simulator.
//!
//! Every fallible function returns an [`FhStatus`]; results come back through
//! out-pointers. On failure the message is kept per thread and can be fetched
//! with [`fh_last_error_message`]. Strings returned by this library must be
//! released with [`fh_string_free`], simulators with [`fh_simulator_free`].
//! Panics never cross the boundary; they are reported as `FH_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedhyp::hypgeom::raw;
use fedhyp::{Checkpoint, Error, ExpMapVariant, RunConfig, Simulator};

/// Status codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Training = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// Exponential map used to embed tangent vectors.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhExpMap {
    Printed = 0,
    Standard = 1,
}

impl From<FhExpMap> for ExpMapVariant {
    fn from(v: FhExpMap) -> Self {
        match v {
            FhExpMap::Printed => ExpMapVariant::Printed,
            FhExpMap::Standard => ExpMapVariant::Standard,
        }
    }
}

/// Opaque simulator handle.
pub struct FhSimulator {
    inner: Simulator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> FhStatus {
    match e {
        Error::Numerical { .. } => FhStatus::Numerical,
        Error::Usage(_) | Error::Shape(_) => FhStatus::InvalidArgument,
        Error::Training { .. } => FhStatus::Training,
        Error::Config(_) => FhStatus::Config,
        Error::Format { .. } => FhStatus::Format,
        Error::Io { .. } => FhStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

type FfiResult<T> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> FhStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FhStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            FhStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            FhStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FhStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    // SAFETY: the caller promises `p` is null or valid for reads.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

fn non_null_mut<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    // SAFETY: the caller promises `p` is null or valid and unaliased.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: non-null and the caller promises `len` readable values.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> FfiResult<&'a mut [f64]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: non-null and the caller promises `len` writable values.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn string<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: non-null and the caller promises a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

fn into_c(s: String) -> *mut c_char {
    // interior NULs cannot occur in JSON or error text, but strip them rather than fail
    CString::new(s.replace('\0', "")).expect("no interior NUL").into_raw()
}

fn check_gamma(gamma: f64) -> FfiResult<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Fail::Arg(format!("curvature must be positive and finite, got {gamma}")))
    }
}

/// Library version as a static NUL-terminated string. Do not free.
#[no_mangle]
pub extern "C" fn fh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The caller owns
/// the returned string.
#[no_mangle]
pub extern "C" fn fh_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().clone()).map_or(ptr::null_mut(), into_c)
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fh_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a simulator from a TOML configuration (null for defaults).
/// Generates the data and pretrains, so this can take a while.
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_new(config_toml: *const c_char, out: *mut *mut FhSimulator) -> FhStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        *out = ptr::null_mut();
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(string(config_toml, "config_toml")?)?
        };
        let sim = Simulator::new(cfg)?;
        *out = Box::into_raw(Box::new(FhSimulator { inner: sim }));
        Ok(())
    })
}

/// Creates a simulator that resumes from a checkpoint file.
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `path` is a
/// NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_from_checkpoint(
    config_toml: *const c_char,
    path: *const c_char,
    out: *mut *mut FhSimulator,
) -> FhStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        *out = ptr::null_mut();
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(string(config_toml, "config_toml")?)?
        };
        let ck = Checkpoint::load(Path::new(string(path, "path")?))?;
        let sim = Simulator::resume(cfg, ck)?;
        *out = Box::into_raw(Box::new(FhSimulator { inner: sim }));
        Ok(())
    })
}

/// Destroys a simulator. Null is ignored.
///
/// # Safety
/// `sim` must come from a constructor of this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_free(sim: *mut FhSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs one round and writes its number to `round` (may be null).
/// Fails with `FH_STATUS_INVALID_ARGUMENT` once every round has run.
///
/// # Safety
/// `sim` is a live handle; `round` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_step(sim: *mut FhSimulator, round: *mut usize) -> FhStatus {
    guard(|| {
        let sim = non_null_mut(sim, "sim")?;
        if sim.inner.is_done() {
            return Err(Fail::Arg("all configured rounds have run".into()));
        }
        let r = sim.inner.step()?.round;
        if let Some(out) = round.as_mut() {
            *out = r;
        }
        Ok(())
    })
}

/// Runs every remaining round.
///
/// # Safety
/// `sim` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_run(sim: *mut FhSimulator) -> FhStatus {
    guard(|| {
        let sim = non_null_mut(sim, "sim")?;
        sim.inner.run_with(|_| Ok(()))?;
        Ok(())
    })
}

/// Rounds completed so far.
///
/// # Safety
/// `sim` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_round(sim: *const FhSimulator, out: *mut usize) -> FhStatus {
    guard(|| {
        *non_null_mut(out, "out")? = non_null(sim, "sim")?.inner.state().round;
        Ok(())
    })
}

/// Current global curvature.
///
/// # Safety
/// `sim` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_gamma(sim: *const FhSimulator, out: *mut f64) -> FhStatus {
    guard(|| {
        *non_null_mut(out, "out")? = non_null(sim, "sim")?.inner.state().gamma.gamma();
        Ok(())
    })
}

/// Combined score of the current global model on the held-out test set, in `[0, 1]`.
///
/// # Safety
/// `sim` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_combined_score(sim: *const FhSimulator, out: *mut f64) -> FhStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let report = non_null(sim, "sim")?.inner.evaluate()?;
        *out = report.combined.ok_or_else(|| Fail::Arg("test set has no labeled cells".into()))?;
        Ok(())
    })
}

/// The round records so far as JSON lines. The caller owns `*out`.
///
/// # Safety
/// `sim` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_records_json(sim: *const FhSimulator, out: *mut *mut c_char) -> FhStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        *out = ptr::null_mut();
        let mut text = String::new();
        for rec in non_null(sim, "sim")?.inner.records() {
            text.push_str(&serde_json::to_string(rec).expect("record serialises"));
            text.push('\n');
        }
        *out = into_c(text);
        Ok(())
    })
}

/// Writes a checkpoint of the global state.
///
/// # Safety
/// `sim` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fh_simulator_save_checkpoint(sim: *const FhSimulator, path: *const c_char) -> FhStatus {
    guard(|| {
        let sim = non_null(sim, "sim")?;
        sim.inner.checkpoint().save(Path::new(string(path, "path")?))?;
        Ok(())
    })
}

/// Möbius addition `x ⊕ y` on the ball of curvature `-gamma`.
///
/// # Safety
/// `x`, `y` and `out` hold `dim` values each; `out` may alias neither input.
#[no_mangle]
pub unsafe extern "C" fn fh_mobius_add(x: *const f64, y: *const f64, dim: usize, gamma: f64, out: *mut f64) -> FhStatus {
    guard(|| {
        check_gamma(gamma)?;
        let z = raw::mobius_add(slice(x, dim, "x")?, slice(y, dim, "y")?, gamma)?;
        slice_mut(out, dim, "out")?.copy_from_slice(&z);
        Ok(())
    })
}

/// Geodesic distance between two ball points.
///
/// # Safety
/// `x` and `y` hold `dim` values each; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fh_distance(x: *const f64, y: *const f64, dim: usize, gamma: f64, out: *mut f64) -> FhStatus {
    guard(|| {
        check_gamma(gamma)?;
        let d = raw::distance(slice(x, dim, "x")?, slice(y, dim, "y")?, gamma);
        *non_null_mut(out, "out")? = d;
        Ok(())
    })
}

/// Exponential map at `x` applied to the tangent vector `v`.
///
/// # Safety
/// `x`, `v` and `out` hold `dim` values each.
#[no_mangle]
pub unsafe extern "C" fn fh_exp_map(
    x: *const f64,
    v: *const f64,
    dim: usize,
    gamma: f64,
    variant: FhExpMap,
    out: *mut f64,
) -> FhStatus {
    guard(|| {
        check_gamma(gamma)?;
        let z = raw::exp_map(slice(x, dim, "x")?, slice(v, dim, "v")?, gamma, variant.into());
        slice_mut(out, dim, "out")?.copy_from_slice(&z);
        Ok(())
    })
}

/// Gyro-midpoint of `n` points stored row-major in `points` (`n * dim`
/// values). `weights` is null for equal weights or holds `n` values.
///
/// # Safety
/// Buffers hold the stated number of values; `out` holds `dim`.
#[no_mangle]
pub unsafe extern "C" fn fh_midpoint(
    points: *const f64,
    n: usize,
    dim: usize,
    weights: *const f64,
    gamma: f64,
    out: *mut f64,
) -> FhStatus {
    guard(|| {
        check_gamma(gamma)?;
        let total = n.checked_mul(dim).ok_or_else(|| Fail::Arg("n * dim overflows".into()))?;
        let flat = slice(points, total, "points")?;
        let rows: Vec<&[f64]> = if dim == 0 { vec![&[][..]; n] } else { flat.chunks(dim).collect() };
        let w = if weights.is_null() { None } else { Some(slice(weights, n, "weights")?) };
        let m = raw::midpoint(&rows, w, gamma)?;
        slice_mut(out, dim, "out")?.copy_from_slice(&m);
        Ok(())
    })
}
