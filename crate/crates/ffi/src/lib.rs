//! C interface to the agentvol toolkit.
//!
//! Models and event streams live behind opaque handles that the caller
//! releases with the matching `_free` function. Every fallible call returns an
//! [`AvStatus`]; on failure [`av_last_error`] describes the most recent error
//! raised on the calling thread. Strings returned to C are owned by the
//! library and released with [`av_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use agentvol::attribution::{sigma2_asymptotic, AttributionError};
use agentvol::estimation::{fit_agent_vs_market, EstimationError, FitConfig, Ridge};
use agentvol::model::{spectral_radius, toy_model, BasisDictionary, HawkesModel, ModelError};
use agentvol::pipeline::{read_events_csv, PipelineError};
use agentvol::simulation::{build_price_path, realized_variance, simulate_thinning, SimulationError};
use agentvol::{AgentId, EventStream, Session};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Malformed JSON or CSV input, or invalid UTF-8.
    Parse = 3,
    Io = 4,
    /// Spectral radius of the branching matrix is at least one.
    Unstable = 5,
    Model = 6,
    Simulation = 7,
    Estimation = 8,
    /// Too few events to fit the requested agent.
    InsufficientEvents = 9,
    /// A Rust panic was caught at the boundary.
    Internal = 10,
}

/// Opaque multivariate Hawkes model.
pub struct AvModel(HawkesModel);

/// Opaque labelled event stream.
pub struct AvStream(EventStream);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(AvStatus, String);

impl Failure {
    fn new(status: AvStatus, message: impl Into<String>) -> Self {
        Failure(status, message.into())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Unstable { .. } => AvStatus::Unstable,
            _ => AvStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

impl From<SimulationError> for Failure {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Model(m) => m.into(),
            e => Failure(AvStatus::Simulation, e.to_string()),
        }
    }
}

impl From<EstimationError> for Failure {
    fn from(e: EstimationError) -> Self {
        let status = match e {
            EstimationError::InsufficientEvents { .. } => AvStatus::InsufficientEvents,
            EstimationError::UnstableGlobal { .. } => AvStatus::Unstable,
            _ => AvStatus::Estimation,
        };
        Failure(status, e.to_string())
    }
}

impl From<AttributionError> for Failure {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Model(m) => m.into(),
            e => Failure(AvStatus::Model, e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::Io(_) => AvStatus::Io,
            _ => AvStatus::Parse,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, records any failure for [`av_last_error`] and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AvStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(AvStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::new(AvStatus::Parse, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::new(AvStatus::NullPointer, format!("{name} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(AvStatus::NullPointer, "output pointer is null"));
    }
    out.write(value);
    Ok(())
}

fn check_out<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure::new(AvStatus::NullPointer, "output pointer is null"))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn av_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn av_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a model from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn av_model_from_json(json: *const c_char, out: *mut *mut AvModel) -> AvStatus {
    guard(|| {
        check_out(out)?;
        let text = str_arg(json, "json")?;
        let model: HawkesModel =
            serde_json::from_str(text).map_err(|e| Failure::new(AvStatus::Parse, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(AvModel(model))))
    })
}

/// Single agent on price moves only: baseline `mu`, self-excitation `phi_s`,
/// cross-excitation `phi_c`, one exponential of rate `decay`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn av_model_toy(
    mu: f64,
    phi_s: f64,
    phi_c: f64,
    decay: f64,
    horizon: f64,
    out: *mut *mut AvModel,
) -> AvStatus {
    guard(|| {
        check_out(out)?;
        let model = toy_model(mu, phi_s, phi_c, decay, horizon)?;
        write_out(out, Box::into_raw(Box::new(AvModel(model))))
    })
}

/// Serialises a model to JSON; release the result with [`av_string_free`].
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn av_model_to_json(model: *const AvModel, out: *mut *mut c_char) -> AvStatus {
    guard(|| {
        check_out(out)?;
        let m = ref_arg(model, "model")?;
        let text = serde_json::to_string(&m.0).map_err(|e| Failure::new(AvStatus::Internal, e.to_string()))?;
        write_out(out, owned_string(text)?)
    })
}

/// Number of components. Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn av_model_dim(model: *const AvModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim())
}

/// Spectral radius of the integrated kernel matrix.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn av_model_spectral_radius(model: *const AvModel, out: *mut f64) -> AvStatus {
    guard(|| {
        check_out(out)?;
        let m = ref_arg(model, "model")?;
        write_out(out, spectral_radius(&m.0.phi())?)
    })
}

/// Row-major `dim * dim` branching matrix `(I - Phi)^-1` written into `buf`,
/// which must hold `len >= dim * dim` values.
///
/// # Safety
/// `model` must come from this library; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn av_model_branching(model: *const AvModel, buf: *mut f64, len: usize) -> AvStatus {
    guard(|| {
        check_out(buf)?;
        let m = ref_arg(model, "model")?;
        let n = m.0.dim();
        if len < n * n {
            return Err(Failure::new(AvStatus::InvalidArgument, format!("buffer holds {len} values, need {}", n * n)));
        }
        let summary = m.0.summarize()?;
        let dst = std::slice::from_raw_parts_mut(buf, n * n);
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = summary.r[(i, j)];
            }
        }
        Ok(())
    })
}

/// Long-run price variance per unit time, in squared jump units.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn av_model_sigma2(model: *const AvModel, out: *mut f64) -> AvStatus {
    guard(|| {
        check_out(out)?;
        let m = ref_arg(model, "model")?;
        let summary = m.0.summarize()?;
        write_out(out, sigma2_asymptotic(&summary, &m.0.jump_vector())?)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn av_model_free(model: *mut AvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Simulates `model` over `[0, horizon)` by thinning.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn av_simulate(
    model: *const AvModel,
    horizon: f64,
    seed: u64,
    out: *mut *mut AvStream,
) -> AvStatus {
    guard(|| {
        check_out(out)?;
        let m = ref_arg(model, "model")?;
        let stream = simulate_thinning(&m.0, horizon, seed)?;
        write_out(out, Box::into_raw(Box::new(AvStream(stream))))
    })
}

/// Reads a classified events CSV, keeping events inside `[open, close)`
/// seconds after midnight.
///
/// # Safety
/// `path` and `day` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn av_stream_from_csv(
    path: *const c_char,
    day: *const c_char,
    open: f64,
    close: f64,
    out: *mut *mut AvStream,
) -> AvStatus {
    guard(|| {
        check_out(out)?;
        let path = str_arg(path, "path")?;
        let day = str_arg(day, "day")?;
        let session = Session::new(open, close).map_err(|e| Failure::new(AvStatus::InvalidArgument, e.to_string()))?;
        let file = std::fs::File::open(Path::new(path)).map_err(|e| Failure::new(AvStatus::Io, format!("{path}: {e}")))?;
        let (stream, _) = read_events_csv(std::io::BufReader::new(file), day, session)?;
        write_out(out, Box::into_raw(Box::new(AvStream(stream))))
    })
}

/// Number of events. Returns 0 for a null handle.
///
/// # Safety
/// `stream` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn av_stream_len(stream: *const AvStream) -> usize {
    stream.as_ref().map_or(0, |s| s.0.len())
}

/// Number of events of `agent`. Returns 0 for a null handle.
///
/// # Safety
/// `stream` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn av_stream_agent_events(stream: *const AvStream, agent: u32) -> usize {
    stream.as_ref().map_or(0, |s| s.0.agent_event_count(AgentId(agent)))
}

/// Realized variance of the mid-price path sampled every `tau` seconds.
///
/// # Safety
/// `stream` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn av_stream_realized_variance(stream: *const AvStream, tau: f64, out: *mut f64) -> AvStatus {
    guard(|| {
        check_out(out)?;
        let s = ref_arg(stream, "stream")?;
        let path = build_price_path(&s.0, 0.0);
        write_out(out, realized_variance(&path, tau)?)
    })
}

/// Releases a stream. Null is ignored.
///
/// # Safety
/// `stream` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn av_stream_free(stream: *mut AvStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Estimation settings for [`av_fit_agent_json`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AvFitOptions {
    /// Exponential decay rates, `n_decays` values.
    pub decays: *const f64,
    pub n_decays: usize,
    pub baseline_bins: usize,
    pub min_events: usize,
    /// Relative ridge on the normalised Gram matrix.
    pub ridge: f64,
}

unsafe fn fit_config(opts: &AvFitOptions) -> Result<FitConfig, Failure> {
    if opts.decays.is_null() || opts.n_decays == 0 {
        return Err(Failure::new(AvStatus::InvalidArgument, "at least one decay rate is required"));
    }
    if opts.baseline_bins == 0 {
        return Err(Failure::new(AvStatus::InvalidArgument, "baseline_bins must be positive"));
    }
    if !(opts.ridge >= 0.0 && opts.ridge.is_finite()) {
        return Err(Failure::new(AvStatus::InvalidArgument, "ridge must be nonnegative"));
    }
    let decays = std::slice::from_raw_parts(opts.decays, opts.n_decays).to_vec();
    Ok(FitConfig {
        basis: BasisDictionary::new(decays)?,
        baseline_bins: opts.baseline_bins,
        min_events: opts.min_events,
        ridge: Ridge::Relative(opts.ridge),
    })
}

fn owned_string(text: String) -> Result<*mut c_char, Failure> {
    CString::new(text)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(AvStatus::Internal, "string contains NUL"))
}

/// Fits `agent` against the rest of the market and returns the fit as JSON.
/// Release the result with [`av_string_free`].
///
/// # Safety
/// `stream` must come from this library; `opts.decays` must hold
/// `opts.n_decays` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn av_fit_agent_json(
    stream: *const AvStream,
    agent: u32,
    opts: *const AvFitOptions,
    out: *mut *mut c_char,
) -> AvStatus {
    guard(|| {
        check_out(out)?;
        let s = ref_arg(stream, "stream")?;
        let cfg = fit_config(ref_arg(opts, "opts")?)?;
        let fit = fit_agent_vs_market(&s.0, AgentId(agent), &cfg)?;
        let text = serde_json::to_string(&fit).map_err(|e| Failure::new(AvStatus::Internal, e.to_string()))?;
        write_out(out, owned_string(text)?)
    })
}

/// Fits `agent` against the rest of the market and writes the integrated
/// self kernels as a row-major 8 x 8 matrix (target type by source type).
///
/// # Safety
/// As [`av_fit_agent_json`]; `self_phi` must hold 64 doubles.
#[no_mangle]
pub unsafe extern "C" fn av_fit_agent_self_phi(
    stream: *const AvStream,
    agent: u32,
    opts: *const AvFitOptions,
    self_phi: *mut f64,
) -> AvStatus {
    guard(|| {
        check_out(self_phi)?;
        let s = ref_arg(stream, "stream")?;
        let cfg = fit_config(ref_arg(opts, "opts")?)?;
        let fit = fit_agent_vs_market(&s.0, AgentId(agent), &cfg)?;
        let dst = std::slice::from_raw_parts_mut(self_phi, 64);
        for t in 0..8 {
            for src in 0..8 {
                dst[t * 8 + src] = fit.self_phi(t, src);
            }
        }
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or an unreleased string from this library.
#[no_mangle]
pub unsafe extern "C" fn av_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
