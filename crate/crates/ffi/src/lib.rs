//! C ABI over `nest-core`.
//!
//! Every fallible function returns a [`NestStatus`]; on failure the message is
//! available from [`nest_last_error_message`] on the same thread until the
//! next failing call. Handles are opaque and must be released with their
//! matching `_free` function. Panics never cross the boundary; they surface as
//! [`NestStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nest_core::dynamics::{kernel_flow, Kernel};
use nest_core::model::{classify_prefix, score, Checkpoint, ModelParams};
use nest_core::preprocess::Preprocessor;
use nest_core::statespace::{read_traces, ActionCode, Label, StateTrace, ACTION_ALPHABET_SIZE, BENIGN_FAMILY};
use nest_core::NestError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NestStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    OutOfRange = 6,
    BufferTooSmall = 7,
    Internal = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: NestStatus, msg: impl Into<String>) -> NestStatus {
    set_error(msg);
    status
}

fn from_core(err: NestError) -> NestStatus {
    let status = match &err {
        NestError::Io { .. } => NestStatus::Io,
        NestError::Parse { .. } => NestStatus::Parse,
        NestError::Shape(_) => NestStatus::Shape,
        _ => NestStatus::InvalidArgument,
    };
    fail(status, err.to_string())
}

fn guard(f: impl FnOnce() -> NestStatus) -> NestStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NestStatus::Internal, "internal panic"),
    }
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nest_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nest_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, NestStatus> {
    if p.is_null() {
        return Err(fail(NestStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(NestStatus::InvalidArgument, "path is not valid UTF-8"))
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(NestStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

// ---------------------------------------------------------------------------
// Model handle.

/// A trained classifier with its preprocessing and cutoff.
pub struct NestModel {
    params: ModelParams,
    tau: f64,
    pre: Preprocessor,
}

/// Loads a checkpoint JSON file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nest_model_load(path: *const c_char, out: *mut *mut NestModel) -> NestStatus {
    guard(|| {
        non_null!(out);
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ckpt = match Checkpoint::read(path) {
            Ok(c) => c,
            Err(e) => return from_core(e),
        };
        let params = match ckpt.model_params() {
            Ok(p) => p,
            Err(e) => return from_core(e),
        };
        let model = NestModel {
            params,
            tau: ckpt.threshold.tau,
            pre: Preprocessor::from_sidecar(&ckpt.stats),
        };
        *out = Box::into_raw(Box::new(model));
        NestStatus::Ok
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`nest_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nest_model_free(model: *mut NestModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of channels per state the model expects.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nest_model_state_dim(model: *const NestModel, out: *mut usize) -> NestStatus {
    guard(|| {
        non_null!(model, out);
        *out = (*model).params.arch.d;
        NestStatus::Ok
    })
}

/// Decision cutoff: a trace is ransomware iff its score exceeds it.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nest_model_threshold(model: *const NestModel, out: *mut f64) -> NestStatus {
    guard(|| {
        non_null!(model, out);
        *out = (*model).tau;
        NestStatus::Ok
    })
}

/// Borrowed view of one trace in caller memory: `n_states * dim` row-major
/// values and `n_states - 1` action codes.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NestTraceView {
    pub states: *const f64,
    pub n_states: usize,
    pub dim: usize,
    pub actions: *const u8,
    /// Family name used for per-family preprocessing; null means benign.
    pub family: *const c_char,
    /// Non-zero when `states` are raw and must go through the model's
    /// denoising and normalization first.
    pub raw: i32,
}

unsafe fn view_to_trace(model: &NestModel, v: &NestTraceView) -> Result<StateTrace, NestStatus> {
    if v.states.is_null() || (v.actions.is_null() && v.n_states > 1) {
        return Err(fail(NestStatus::NullPointer, "trace buffers are null"));
    }
    if v.n_states < 2 {
        return Err(fail(NestStatus::Shape, "a trace needs at least two states"));
    }
    if v.dim != model.params.arch.d {
        return Err(fail(
            NestStatus::Shape,
            format!("trace has {} channels, model expects {}", v.dim, model.params.arch.d),
        ));
    }
    let family = if v.family.is_null() {
        BENIGN_FAMILY.to_string()
    } else {
        match CStr::from_ptr(v.family).to_str() {
            Ok(s) => s.to_string(),
            Err(_) => return Err(fail(NestStatus::InvalidArgument, "family is not valid UTF-8")),
        }
    };
    let states = std::slice::from_raw_parts(v.states, v.n_states * v.dim).to_vec();
    if states.iter().any(|x| !x.is_finite()) {
        return Err(fail(NestStatus::InvalidArgument, "non-finite state value"));
    }
    let actions = std::slice::from_raw_parts(v.actions, v.n_states - 1);
    if let Some(a) = actions.iter().find(|a| usize::from(**a) >= ACTION_ALPHABET_SIZE) {
        return Err(fail(NestStatus::OutOfRange, format!("action code {a} outside the alphabet")));
    }
    let label = if family == BENIGN_FAMILY { Label::Benign } else { Label::Ransomware };
    let trace = StateTrace {
        id: "ffi".into(),
        order: 0,
        label,
        family,
        window_dt: 1.0,
        dim: v.dim,
        states,
        actions: actions.iter().map(|a| ActionCode(*a)).collect(),
    };
    if v.raw != 0 {
        model.pre.apply(&trace).map_err(from_core)
    } else {
        Ok(trace)
    }
}

/// Ransomware probability of a whole trace.
///
/// # Safety
/// Pointers must be valid and buffers sized as described by the view.
#[no_mangle]
pub unsafe extern "C" fn nest_model_score(model: *const NestModel, trace: *const NestTraceView, out_score: *mut f64) -> NestStatus {
    guard(|| {
        non_null!(model, trace, out_score);
        let m = &*model;
        let t = match view_to_trace(m, &*trace) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match score(&t, &m.params) {
            Ok(s) => {
                *out_score = s;
                NestStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Score plus decision: `*out_ransomware` is 1 when the score exceeds the
/// model threshold, else 0. `out_score` may be null.
///
/// # Safety
/// Pointers must be valid and buffers sized as described by the view.
#[no_mangle]
pub unsafe extern "C" fn nest_model_classify(
    model: *const NestModel,
    trace: *const NestTraceView,
    out_ransomware: *mut i32,
    out_score: *mut f64,
) -> NestStatus {
    guard(|| {
        non_null!(out_ransomware);
        let mut s = 0.0;
        let status = nest_model_score(model, trace, &mut s);
        if status != NestStatus::Ok {
            return status;
        }
        *out_ransomware = i32::from(s > (*model).tau);
        if !out_score.is_null() {
            *out_score = s;
        }
        NestStatus::Ok
    })
}

/// Early detection over growing prefixes. `*out_detected` is 1 and
/// `*out_window` the end window of the first run of `persistence` positive
/// prefixes evaluated every `stride` windows; otherwise 0 and 0.
///
/// # Safety
/// Pointers must be valid and buffers sized as described by the view.
#[no_mangle]
pub unsafe extern "C" fn nest_model_classify_prefix(
    model: *const NestModel,
    trace: *const NestTraceView,
    stride: usize,
    persistence: usize,
    out_detected: *mut i32,
    out_window: *mut usize,
) -> NestStatus {
    guard(|| {
        non_null!(model, trace, out_detected, out_window);
        if stride == 0 {
            return fail(NestStatus::InvalidArgument, "stride must be >= 1");
        }
        let m = &*model;
        let t = match view_to_trace(m, &*trace) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match classify_prefix(&t, &m.params, m.tau, stride, persistence) {
            Ok(hit) => {
                *out_detected = i32::from(hit.is_some());
                *out_window = hit.unwrap_or(0);
                NestStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

// ---------------------------------------------------------------------------
// Trace collections.

/// Traces read from a JSON-lines file.
pub struct NestTraces {
    traces: Vec<StateTrace>,
}

/// Reads a JSON-lines trace file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nest_traces_load(path: *const c_char, out: *mut *mut NestTraces) -> NestStatus {
    guard(|| {
        non_null!(out);
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_traces(path) {
            Ok(traces) => {
                *out = Box::into_raw(Box::new(NestTraces { traces }));
                NestStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Releases a trace collection. Null is ignored.
///
/// # Safety
/// `traces` must come from [`nest_traces_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nest_traces_free(traces: *mut NestTraces) {
    if !traces.is_null() {
        drop(Box::from_raw(traces));
    }
}

/// Number of traces in the collection.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nest_traces_len(traces: *const NestTraces, out: *mut usize) -> NestStatus {
    guard(|| {
        non_null!(traces, out);
        *out = (*traces).traces.len();
        NestStatus::Ok
    })
}

unsafe fn trace_at<'a>(traces: *const NestTraces, index: usize) -> Result<&'a StateTrace, NestStatus> {
    let all = &*traces;
    all.traces
        .get(index)
        .ok_or_else(|| fail(NestStatus::OutOfRange, format!("trace index {index} out of range")))
}

/// State count and channel count of trace `index`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nest_traces_dims(
    traces: *const NestTraces,
    index: usize,
    out_states: *mut usize,
    out_dim: *mut usize,
) -> NestStatus {
    guard(|| {
        non_null!(traces, out_states, out_dim);
        match trace_at(traces, index) {
            Ok(t) => {
                *out_states = t.len();
                *out_dim = t.dim;
                NestStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// 1 for ransomware, 0 for benign.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nest_traces_label(traces: *const NestTraces, index: usize, out: *mut i32) -> NestStatus {
    guard(|| {
        non_null!(traces, out);
        match trace_at(traces, index) {
            Ok(t) => {
                *out = i32::from(t.label == Label::Ransomware);
                NestStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Copies the row-major states of trace `index` into `buf` (`len` values).
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nest_traces_copy_states(traces: *const NestTraces, index: usize, buf: *mut f64, len: usize) -> NestStatus {
    guard(|| {
        non_null!(traces, buf);
        let t = match trace_at(traces, index) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if len < t.states.len() {
            return fail(
                NestStatus::BufferTooSmall,
                format!("need {} values, buffer holds {len}", t.states.len()),
            );
        }
        ptr::copy_nonoverlapping(t.states.as_ptr(), buf, t.states.len());
        NestStatus::Ok
    })
}

/// Copies the action codes of trace `index` into `buf` (`len` bytes).
///
/// # Safety
/// `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn nest_traces_copy_actions(traces: *const NestTraces, index: usize, buf: *mut u8, len: usize) -> NestStatus {
    guard(|| {
        non_null!(traces, buf);
        let t = match trace_at(traces, index) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if len < t.actions.len() {
            return fail(
                NestStatus::BufferTooSmall,
                format!("need {} actions, buffer holds {len}", t.actions.len()),
            );
        }
        for (i, a) in t.actions.iter().enumerate() {
            *buf.add(i) = a.0;
        }
        NestStatus::Ok
    })
}

// ---------------------------------------------------------------------------
// Numerics.

/// Kernel flow of a `dim`-component state with an odd-length kernel; writes
/// `dim` values to `out`.
///
/// # Safety
/// `state` and `out` must hold `dim` doubles, `kernel` `kernel_len`.
#[no_mangle]
pub unsafe extern "C" fn nest_kernel_flow(
    state: *const f64,
    dim: usize,
    kernel: *const f64,
    kernel_len: usize,
    out: *mut f64,
) -> NestStatus {
    guard(|| {
        non_null!(state, kernel, out);
        let k = match Kernel::new(std::slice::from_raw_parts(kernel, kernel_len).to_vec()) {
            Ok(k) => k,
            Err(e) => return from_core(e),
        };
        match kernel_flow(std::slice::from_raw_parts(state, dim), &k) {
            Ok(v) => {
                ptr::copy_nonoverlapping(v.as_ptr(), out, dim);
                NestStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}
