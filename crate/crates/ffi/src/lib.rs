//! C ABI over the dcbench decision layer.
//!
//! Every function returns a [`DcbStatus`]. On failure a message is kept in
//! thread-local storage and can be read with [`dcb_last_error_message`].
//! Index and trace sets are opaque handles; strings returned through
//! `char **` out-parameters must be released with [`dcb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dcbench::calendar::dc_policy;
use dcbench::decision::{threshold_rule, ActionKind, EvaluatorRegistry, Signal, SignalSource, UtilityProblem};
use dcbench::graph::{graph_policy, GraphPolicyInput};
use dcbench::retrieval::{self, Bm25Index, Passage};
use dcbench::signal::blend_composite;
use dcbench::trace::{load_traces, replay_threshold_controller, EpisodeTrace};
use dcbench::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Data = 5,
    NoFeasibleAction = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcbAction {
    Execute = 0,
    Clarify = 1,
    Backtrack = 2,
    Accept = 3,
    Stop = 4,
    Expand = 5,
    Custom = 6,
}

impl From<ActionKind> for DcbAction {
    fn from(k: ActionKind) -> Self {
        match k {
            ActionKind::Execute => DcbAction::Execute,
            ActionKind::Clarify => DcbAction::Clarify,
            ActionKind::Backtrack => DcbAction::Backtrack,
            ActionKind::Accept => DcbAction::Accept,
            ActionKind::Stop => DcbAction::Stop,
            ActionKind::Expand => DcbAction::Expand,
            ActionKind::Custom => DcbAction::Custom,
        }
    }
}

/// Inputs to the graph search policy.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DcbGraphInput {
    pub p_suff: f64,
    pub p_corr: f64,
    pub just_traversed: bool,
    pub n_untried: u32,
    pub n_hidden: u32,
    /// Completed turns.
    pub turn: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DcbReplay {
    pub success: bool,
    /// Round at which the controller stopped.
    pub rounds: u32,
}

/// BM25 index over a passage file.
pub struct DcbIndex {
    inner: Bm25Index,
}

/// Saved episode traces.
pub struct DcbTraceSet {
    traces: Vec<EpisodeTrace>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DcbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } => DcbStatus::Config,
            Error::NoFeasibleAction => DcbStatus::NoFeasibleAction,
            Error::File { .. } | Error::Io(_) => DcbStatus::Io,
            Error::Json(_) | Error::Data(_) | Error::IncompleteTrace { .. } => DcbStatus::Data,
            Error::Precondition(_) => DcbStatus::InvalidArgument,
            _ => DcbStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DcbStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DcbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcbStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            DcbStatus::Internal
        }
    }
}

fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller promises `p` is null or valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(DcbStatus::NullPointer, format!("`{name}` is null")))
}

fn in_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller promises `p` is null or a live object.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(DcbStatus::NullPointer, format!("`{name}` is null")))
}

fn in_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DcbStatus::NullPointer, format!("`{name}` is null")));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not UTF-8")))
}

fn in_slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(DcbStatus::NullPointer, format!("`{name}` is null")));
    }
    // SAFETY: caller guarantees `len` readable doubles at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn give_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let slot = out_ref(out, "out")?;
    let c = CString::new(s).map_err(|_| Failure(DcbStatus::Internal, "interior nul in output".into()))?;
    *slot = c.into_raw();
    Ok(())
}

fn unit_signal(name: &str, v: f64) -> Result<Signal, Failure> {
    Signal::new(name, v, SignalSource::External).map_err(Failure::from)
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dcb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn dcb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Execute when `p_suff >= tau`, otherwise clarify.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dcb_threshold_rule(p_suff: f64, tau: f64, out: *mut DcbAction) -> DcbStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(invalid(format!("tau {tau} outside [0, 1]")));
        }
        let s = unit_signal("p_suff", p_suff)?;
        *out = threshold_rule(&s, tau).kind.into();
        Ok(())
    })
}

/// `alpha * p_dense + (1 - alpha) * p_llm`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dcb_blend_composite(p_dense: f64, p_llm: f64, alpha: f64, out: *mut f64) -> DcbStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let d = unit_signal("p_dense", p_dense)?;
        let l = unit_signal("p_llm", p_llm)?;
        *out = blend_composite(&d, &l, alpha)?.value;
        Ok(())
    })
}

/// Graph search policy with thresholds `tau_suff` and `theta_corr`.
///
/// # Safety
/// `input` must be null or point to a valid struct; `out` must be null or
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dcb_graph_policy(
    input: *const DcbGraphInput,
    tau_suff: f64,
    theta_corr: f64,
    out: *mut DcbAction,
) -> DcbStatus {
    guard(|| {
        let i = in_ref(input, "input")?;
        let out = out_ref(out, "out")?;
        for (name, v) in [("p_suff", i.p_suff), ("p_corr", i.p_corr), ("tau_suff", tau_suff), ("theta_corr", theta_corr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        let input = GraphPolicyInput {
            p_suff: i.p_suff,
            p_corr: i.p_corr,
            just_traversed: i.just_traversed,
            n_untried: i.n_untried as usize,
            n_hidden: i.n_hidden as usize,
            turn: i.turn,
        };
        *out = graph_policy(&input, tau_suff, theta_corr).into();
        Ok(())
    })
}

/// Calendar act-or-ask rule: clarify after a failed execution, execute only
/// when every field is present.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dcb_calendar_policy(
    p_suff: f64,
    last_execute_failed: bool,
    out: *mut DcbAction,
) -> DcbStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        unit_signal("p_suff", p_suff)?;
        let (last, valid) = if last_execute_failed {
            (Some(ActionKind::Execute), Some(false))
        } else {
            (None, None)
        };
        *out = dc_policy(p_suff, last, valid).into();
        Ok(())
    })
}

/// Solves a utility problem given as JSON (`actions`, `utility`, optional
/// `context`) and returns the chosen action id.
///
/// # Safety
/// `problem_json` must be a NUL-terminated string; `out_id` must be null
/// or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dcb_utility_argmax(problem_json: *const c_char, out_id: *mut *mut c_char) -> DcbStatus {
    guard(|| {
        let text = in_str(problem_json, "problem_json")?;
        let problem = UtilityProblem::from_json(text)?;
        let chosen = problem.solve(&EvaluatorRegistry::new())?;
        give_string(out_id, chosen.id)
    })
}

/// Builds a BM25 index from a passage JSONL file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be null or valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn dcb_index_new_from_jsonl(path: *const c_char, out: *mut *mut DcbIndex) -> DcbStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let path = in_str(path, "path")?;
        let passages: Vec<Passage> = retrieval::read_jsonl(Path::new(path))?;
        let inner = retrieval::build_bm25_index(passages)?;
        *slot = Box::into_raw(Box::new(DcbIndex { inner }));
        Ok(())
    })
}

/// # Safety
/// `index` must be null or a handle from [`dcb_index_new_from_jsonl`]
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn dcb_index_free(index: *mut DcbIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of passages in the index.
///
/// # Safety
/// `index` must be null or a live handle; `out` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn dcb_index_len(index: *const DcbIndex, out: *mut usize) -> DcbStatus {
    guard(|| {
        *out_ref(out, "out")? = in_ref(index, "index")?.inner.len();
        Ok(())
    })
}

/// Top-`k` passages as a JSON array of `{"id", "score"}`.
///
/// # Safety
/// `index` must be a live handle, `query` a NUL-terminated string and
/// `out_json` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dcb_index_search(
    index: *const DcbIndex,
    query: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> DcbStatus {
    guard(|| {
        let index = in_ref(index, "index")?;
        let query = in_str(query, "query")?;
        let hits: Vec<serde_json::Value> = index
            .inner
            .search(query, k)
            .into_iter()
            .map(|(p, s)| serde_json::json!({ "id": p.id, "score": s }))
            .collect();
        give_string(out_json, serde_json::Value::Array(hits).to_string())
    })
}

/// Loads a trace JSONL file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn dcb_traces_open(path: *const c_char, out: *mut *mut DcbTraceSet) -> DcbStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let traces = load_traces(in_str(path, "path")?)?;
        *slot = Box::into_raw(Box::new(DcbTraceSet { traces }));
        Ok(())
    })
}

/// # Safety
/// `set` must be null or a handle from [`dcb_traces_open`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn dcb_traces_free(set: *mut DcbTraceSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// # Safety
/// `set` must be a live handle; `out` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn dcb_traces_len(set: *const DcbTraceSet, out: *mut usize) -> DcbStatus {
    guard(|| {
        *out_ref(out, "out")? = in_ref(set, "set")?.traces.len();
        Ok(())
    })
}

/// Replays trace `i` under the composite threshold controller.
///
/// # Safety
/// `set` must be a live handle; `out` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn dcb_traces_replay(
    set: *const DcbTraceSet,
    i: usize,
    tau: f64,
    alpha: f64,
    budget: u32,
    out: *mut DcbReplay,
) -> DcbStatus {
    guard(|| {
        let set = in_ref(set, "set")?;
        let out = out_ref(out, "out")?;
        let trace = set
            .traces
            .get(i)
            .ok_or_else(|| invalid(format!("trace index {i} out of range ({})", set.traces.len())))?;
        let r = replay_threshold_controller(trace, tau, alpha, budget)?;
        *out = DcbReplay {
            success: r.success,
            rounds: r.rounds,
        };
        Ok(())
    })
}

/// Sweeps the grid and returns the per-bucket rows as a JSON array.
///
/// # Safety
/// `taus` and `alphas` must point to `n_tau` and `n_alpha` doubles; `set`
/// must be a live handle; `out_json` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn dcb_traces_sweep(
    set: *const DcbTraceSet,
    taus: *const f64,
    n_tau: usize,
    alphas: *const f64,
    n_alpha: usize,
    budget: u32,
    out_json: *mut *mut c_char,
) -> DcbStatus {
    guard(|| {
        let set = in_ref(set, "set")?;
        let taus = in_slice(taus, n_tau, "taus")?;
        let alphas = in_slice(alphas, n_alpha, "alphas")?;
        let rows = retrieval::sweep(&set.traces, taus, alphas, budget)?;
        let json = serde_json::to_string(&rows).map_err(|e| Failure::from(Error::from(e)))?;
        give_string(out_json, json)
    })
}
