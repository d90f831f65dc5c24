//! C ABI over `socratic-core`.
//!
//! Conventions:
//! - every fallible call returns an [`SpStatus`]; on anything but `SP_STATUS_OK`
//!   a message is available from [`sp_last_error`] on the same thread;
//! - strings handed out (`char **out`) are owned by the caller and must be
//!   released with [`sp_string_free`];
//! - handles are opaque and released with their matching `*_free`.
//!
//! No call ever unwinds across the boundary; panics come back as
//! `SP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use serde_json::json;
use socratic_core::bench::{self, BenchError, TaskSet};
use socratic_core::eval::{compile_relaxed_spec, relaxed_match, score_dataset, strict_match};
use socratic_core::gateway::{GatewayConfig, GatewayError, OracleScript};
use socratic_core::plan::parse_plan;
use socratic_core::{EpisodeConfig, GtAnnotation, ModelGateway, ScriptedGateway, SocraticPlanner};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Malformed input: task file, script, plan text, annotation, trace.
    Parse = 3,
    Io = 4,
    /// Invalid configuration or unknown scenario id.
    Config = 5,
    /// The gateway could not be constructed or called outside an episode.
    /// Model failures during an episode end it with outcome `Aborted` and are
    /// reported in the trace instead.
    Gateway = 6,
    /// Reserved for planning errors that escape the trace.
    Planning = 7,
    Panic = 99,
}

/// Loaded task set.
pub struct SpTaskSet {
    inner: TaskSet,
}

/// Model gateway (scripted or HTTP).
pub struct SpGateway {
    inner: Box<dyn ModelGateway>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(SpStatus, String);

type FfiResult<T> = Result<T, Fail>;

fn fail<T>(status: SpStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Fail(status, msg.into()))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> SpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(SpStatus::NullArgument, format!("`{name}` is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| {
        fail(
            SpStatus::InvalidUtf8,
            format!("`{name}` is not valid UTF-8"),
        )
    })
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| Fail(SpStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Fail(SpStatus::NullArgument, format!("`{name}` is null")))
}

fn give_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

fn bench_fail(e: BenchError) -> Fail {
    let status = match &e {
        BenchError::Io { .. } => SpStatus::Io,
        BenchError::Config(_) => SpStatus::Config,
        BenchError::Gateway(_) => SpStatus::Gateway,
        _ => SpStatus::Parse,
    };
    Fail(status, e.to_string())
}

fn gateway_fail(e: GatewayError) -> Fail {
    let status = match &e {
        GatewayError::MalformedScript(_) => SpStatus::Parse,
        GatewayError::Config(_) => SpStatus::Config,
        _ => SpStatus::Gateway,
    };
    Fail(status, e.to_string())
}

fn parse_gt(json: &str) -> FfiResult<GtAnnotation> {
    let gt: GtAnnotation = serde_json::from_str(json)
        .or_else(|e| fail(SpStatus::Parse, format!("annotation: {e}")))?;
    gt.validate()
        .map_err(|e| Fail(SpStatus::Parse, e.to_string()))?;
    Ok(gt)
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next `sp_*` call on the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned through an `out` parameter. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn sp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a task file (object with `scenarios`, or a bare array).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_taskset_load(
    path: *const c_char,
    out: *mut *mut SpTaskSet,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let inner = bench::load_tasks(Path::new(path)).map_err(bench_fail)?;
        *out = Box::into_raw(Box::new(SpTaskSet { inner }));
        Ok(())
    })
}

/// Parses a task set from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_taskset_parse(
    json: *const c_char,
    out: *mut *mut SpTaskSet,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let text = str_arg(json, "json")?;
        let inner = bench::parse_tasks(text, "inline").map_err(bench_fail)?;
        *out = Box::into_raw(Box::new(SpTaskSet { inner }));
        Ok(())
    })
}

/// Number of scenarios; 0 for null.
///
/// # Safety
/// `tasks` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_taskset_len(tasks: *const SpTaskSet) -> usize {
    tasks.as_ref().map_or(0, |t| t.inner.scenarios.len())
}

/// Scenario id at `index` as a new string.
///
/// # Safety
/// `tasks` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_taskset_scenario_id(
    tasks: *const SpTaskSet,
    index: usize,
    out: *mut *mut c_char,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = ref_arg(tasks, "tasks")?;
        let Some(s) = t.inner.scenarios.get(index) else {
            return fail(SpStatus::Config, format!("index {index} out of range"));
        };
        *out = give_string(s.id.clone());
        Ok(())
    })
}

/// # Safety
/// `tasks` must be null or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sp_taskset_free(tasks: *mut SpTaskSet) {
    if !tasks.is_null() {
        drop(Box::from_raw(tasks));
    }
}

/// Scripted gateway from a script file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_gateway_scripted_load(
    path: *const c_char,
    out: *mut *mut SpGateway,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let script = socratic_core::gateway::load_script(Path::new(path)).map_err(gateway_fail)?;
        *out = Box::into_raw(Box::new(SpGateway {
            inner: Box::new(ScriptedGateway::new(script)),
        }));
        Ok(())
    })
}

/// Scripted gateway from script JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_gateway_scripted_parse(
    json: *const c_char,
    out: *mut *mut SpGateway,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let text = str_arg(json, "json")?;
        let script = OracleScript::parse(text).map_err(gateway_fail)?;
        *out = Box::into_raw(Box::new(SpGateway {
            inner: Box::new(ScriptedGateway::new(script)),
        }));
        Ok(())
    })
}

/// HTTP gateway with default timeout, retries and concurrency. The API key
/// is read from the environment variable named by `api_key_env` on each
/// request; null means `OPENAI_API_KEY`.
///
/// # Safety
/// String arguments must be NUL-terminated (`api_key_env` may be null);
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_gateway_http(
    endpoint: *const c_char,
    model: *const c_char,
    api_key_env: *const c_char,
    out: *mut *mut SpGateway,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut cfg = GatewayConfig::http(str_arg(endpoint, "endpoint")?, str_arg(model, "model")?);
        if let (Some(env), GatewayConfig::Http(h)) =
            (opt_str_arg(api_key_env, "api_key_env")?, &mut cfg)
        {
            h.api_key_env = env.to_string();
        }
        let gw = cfg.build().map_err(gateway_fail)?;
        *out = Box::into_raw(Box::new(SpGateway {
            inner: Box::new(gw),
        }));
        Ok(())
    })
}

/// # Safety
/// `gateway` must be null or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sp_gateway_free(gateway: *mut SpGateway) {
    if !gateway.is_null() {
        drop(Box::from_raw(gateway));
    }
}

/// Runs one episode and returns its trace as a JSON object.
///
/// `config_json` is an episode configuration object; omitted fields take
/// their defaults, and null means all defaults. A `seed` field of 0 is kept
/// as is; use [`sp_derive_seed`] to reproduce the CLI's per-task seeds.
///
/// # Safety
/// Handles must be live; strings NUL-terminated (`config_json` may be
/// null); `out_trace` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_run_episode(
    tasks: *const SpTaskSet,
    gateway: *const SpGateway,
    scenario_id: *const c_char,
    config_json: *const c_char,
    out_trace: *mut *mut c_char,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out_trace, "out_trace")?;
        let tasks = ref_arg(tasks, "tasks")?;
        let gw = ref_arg(gateway, "gateway")?;
        let id = str_arg(scenario_id, "scenario_id")?;
        let cfg: EpisodeConfig = match opt_str_arg(config_json, "config_json")? {
            None => EpisodeConfig::default(),
            Some(j) => serde_json::from_str(j)
                .or_else(|e| fail(SpStatus::Config, format!("config: {e}")))?,
        };
        let Some(s) = tasks.inner.get(id) else {
            return fail(SpStatus::Config, format!("unknown scenario `{id}`"));
        };
        let trace = SocraticPlanner::new(gw.inner.as_ref(), cfg)
            .run_episode(s)
            .map_err(|e| {
                use socratic_core::engine::EngineError as E;
                let status = match &e {
                    E::Gateway(_) => SpStatus::Gateway,
                    E::Config(_) => SpStatus::Config,
                    E::PlanningFailed(_) | E::MalformedTranscript => SpStatus::Planning,
                    _ => SpStatus::Parse,
                };
                Fail(status, e.to_string())
            })?;
        *out = give_string(trace.to_json_line());
        Ok(())
    })
}

/// Per-scenario seed used by batch runs.
///
/// # Safety
/// `scenario_id` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_derive_seed(
    global: u64,
    scenario_id: *const c_char,
    out: *mut u64,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = bench::derive_seed(global, str_arg(scenario_id, "scenario_id")?);
        Ok(())
    })
}

/// Extracts subgoals from free text. Output: `{"steps": [...], "skipped_lines": n}`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_parse_plan(
    text: *const c_char,
    out_json: *mut *mut c_char,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        let parsed =
            parse_plan(str_arg(text, "text")?).map_err(|e| Fail(SpStatus::Parse, e.to_string()))?;
        *out = give_string(
            json!({"steps": parsed.plan.steps, "skipped_lines": parsed.skipped_lines}).to_string(),
        );
        Ok(())
    })
}

unsafe fn match_plan(
    plan_text: *const c_char,
    annotation_json: *const c_char,
    out: *mut bool,
    relaxed: bool,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let parsed = parse_plan(str_arg(plan_text, "plan_text")?)
            .map_err(|e| Fail(SpStatus::Parse, e.to_string()))?;
        let gt = parse_gt(str_arg(annotation_json, "annotation_json")?)?;
        *out = if relaxed {
            let spec =
                compile_relaxed_spec(&gt).map_err(|e| Fail(SpStatus::Parse, e.to_string()))?;
            relaxed_match(&parsed.plan, &spec)
        } else {
            strict_match(&parsed.plan, &gt)
        };
        Ok(())
    })
}

/// Exact match of a plan (template lines) against an annotation's core sequence.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_strict_match(
    plan_text: *const c_char,
    annotation_json: *const c_char,
    out: *mut bool,
) -> SpStatus {
    match_plan(plan_text, annotation_json, out, false)
}

/// Match allowing the annotation's floating steps, wildcard receptacles and
/// swappable blocks.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_relaxed_match(
    plan_text: *const c_char,
    annotation_json: *const c_char,
    out: *mut bool,
) -> SpStatus {
    match_plan(plan_text, annotation_json, out, true)
}

/// Scores JSON-lines traces against the task set's annotations and returns
/// the metrics report as JSON.
///
/// # Safety
/// `tasks` must be a live handle; `traces_jsonl` NUL-terminated;
/// `out_report` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_score(
    tasks: *const SpTaskSet,
    traces_jsonl: *const c_char,
    out_report: *mut *mut c_char,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out_report, "out_report")?;
        let tasks = ref_arg(tasks, "tasks")?;
        let traces = str_arg(traces_jsonl, "traces_jsonl")?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| bench::parse_trace_line(l, i + 1))
            .collect::<Result<Vec<_>, _>>()
            .map_err(bench_fail)?;
        let report = score_dataset(&traces, &tasks.inner.ground_truth())
            .map_err(|e| Fail(SpStatus::Config, e.to_string()))?;
        *out = give_string(serde_json::to_string(&report).expect("report serializes"));
        Ok(())
    })
}
