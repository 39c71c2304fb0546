//! C ABI over the execbench environments and scoring functions.
//!
//! Every fallible function returns an [`EbStatus`]; on failure the message
//! is available from [`eb_last_error`] on the same thread. Strings handed
//! out by the library are NUL-terminated UTF-8 and must be released with
//! [`eb_string_free`]. Structured results (observations, step outcomes,
//! trajectories) are JSON documents.
//!
//! ```c
//! EbEnv *env = NULL;
//! if (eb_env_open("sql", "tasks.jsonl", "local", NULL, &env) != EB_STATUS_OK) {
//!     fprintf(stderr, "%s\n", eb_last_error());
//! }
//! char *obs = NULL;
//! eb_env_reset(env, 0, &obs);
//! eb_string_free(obs);
//! eb_env_free(env);
//! ```

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use execbench::backend;
use execbench::envs::{self, EnvOptions};
use execbench::episode::{Action, EngineConfig, EnvError, EnvHandle};
use execbench::scoring::{gauss_erf, kendall_tau_b, lexical_similarity, sql_reward, ResultSet};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Bounds = 4,
    Lifecycle = 5,
    Infrastructure = 6,
    Evaluation = 7,
    Preprocess = 8,
    Io = 9,
    Panic = 10,
}

/// Opaque environment session.
pub struct EbEnv {
    handle: EnvHandle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(EbStatus, String);

impl From<EnvError> for Fail {
    fn from(e: EnvError) -> Self {
        let status = match &e {
            EnvError::Bounds { .. } => EbStatus::Bounds,
            EnvError::Lifecycle(_) => EbStatus::Lifecycle,
            EnvError::Infrastructure(_) => EbStatus::Infrastructure,
            EnvError::Evaluation(_) => EbStatus::Evaluation,
            EnvError::Preprocess(_) => EbStatus::Preprocess,
            EnvError::Argument(_) => EbStatus::InvalidArgument,
            EnvError::Io(_) => EbStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(EbStatus::InvalidArgument, msg.into())
}

/// Run `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EbStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EbStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EbStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn required<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(EbStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(EbStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn optional<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        required(p, name).map(Some)
    }
}

/// # Safety
/// `out` is null or valid for a pointer write.
unsafe fn give_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Ok(());
    }
    let c = CString::new(s).map_err(|_| invalid("result contains a NUL byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// # Safety
/// `env` is null or a live handle from [`eb_env_open`].
unsafe fn env_mut<'a>(env: *mut EbEnv) -> Result<&'a mut EbEnv, Fail> {
    env.as_mut().ok_or_else(|| Fail(EbStatus::NullArgument, "env is null".into()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn eb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next library call on the same thread.
#[no_mangle]
pub extern "C" fn eb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` is null or a pointer returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Open environment `env_name` (`bash`, `sql`, `python`, `ctf`) over the
/// tasks in `dataset_path`. `backend` is `docker`, `local` or `auto` (null
/// means auto). `options_json` is null or a JSON object of environment
/// options.
///
/// # Safety
/// String arguments are null or valid NUL-terminated strings; `out` is valid
/// for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn eb_env_open(
    env_name: *const c_char,
    dataset_path: *const c_char,
    backend: *const c_char,
    options_json: *const c_char,
    out: *mut *mut EbEnv,
) -> EbStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(EbStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let name = required(env_name, "env_name")?;
        let path = required(dataset_path, "dataset_path")?;
        let backend_name = optional(backend, "backend")?.unwrap_or("auto");
        let options = match optional(options_json, "options_json")? {
            Some(text) => {
                let v = serde_json::from_str(text).map_err(|e| invalid(format!("options_json: {e}")))?;
                EnvOptions::from_value(&v)?
            }
            None => EnvOptions::default(),
        };
        let tasks = envs::load_tasks(name, Path::new(path))?;
        let backend = backend::from_name(backend_name).map_err(|e| Fail(EbStatus::Infrastructure, e.to_string()))?;
        let env = envs::open(name, backend, &options)?;
        let handle = EnvHandle::new(env, tasks, EngineConfig::default())?;
        *out = Box::into_raw(Box::new(EbEnv { handle }));
        Ok(())
    })
}

/// Number of tasks in the session's dataset.
///
/// # Safety
/// `env` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eb_env_task_count(env: *const EbEnv) -> usize {
    env.as_ref().map_or(0, |e| e.handle.tasks().len())
}

/// Start an episode on task `index`; a negative index takes the next task.
/// Writes `{"observation": ..., "task_id": ...}` to `out_json` when non-null.
///
/// # Safety
/// `env` is a live handle; `out_json` is null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn eb_env_reset(env: *mut EbEnv, index: i64, out_json: *mut *mut c_char) -> EbStatus {
    guard(|| {
        let e = env_mut(env)?;
        let index = usize::try_from(index).ok();
        let (obs, task) = e.handle.reset(index)?;
        let doc = serde_json::json!({ "observation": obs, "task_id": task.id });
        give_string(out_json, doc.to_string())
    })
}

fn step(e: &mut EbEnv, action: Action, out_json: *mut *mut c_char) -> Result<(), Fail> {
    let outcome = e.handle.step(action)?;
    let doc = serde_json::to_string(&outcome).map_err(|err| invalid(err.to_string()))?;
    // SAFETY: forwarded from the caller's contract
    unsafe { give_string(out_json, doc) }
}

/// Execute one code action. Writes the step outcome JSON
/// (`observation`, `reward`, `done`, `info`) to `out_json` when non-null.
///
/// # Safety
/// `env` is a live handle; `code` is a valid string; `out_json` is null or
/// valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn eb_env_step(env: *mut EbEnv, code: *const c_char, out_json: *mut *mut c_char) -> EbStatus {
    guard(|| {
        let e = env_mut(env)?;
        let code = required(code, "code")?;
        step(e, Action::Code(code.to_string()), out_json)
    })
}

/// Submit, optionally with a payload (null for a bare submit), ending the
/// episode.
///
/// # Safety
/// As [`eb_env_step`]; `payload` may be null.
#[no_mangle]
pub unsafe extern "C" fn eb_env_submit(env: *mut EbEnv, payload: *const c_char, out_json: *mut *mut c_char) -> EbStatus {
    guard(|| {
        let e = env_mut(env)?;
        let payload = optional(payload, "payload")?.map(str::to_string);
        step(e, Action::Submit(payload), out_json)
    })
}

/// Trajectory JSON of the last finished episode.
///
/// # Safety
/// `env` is a live handle; `out_json` is valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn eb_env_trajectory(env: *mut EbEnv, out_json: *mut *mut c_char) -> EbStatus {
    guard(|| {
        let e = env_mut(env)?;
        if out_json.is_null() {
            return Err(Fail(EbStatus::NullArgument, "out_json is null".into()));
        }
        let t = e
            .handle
            .last_trajectory()
            .ok_or_else(|| Fail(EbStatus::Lifecycle, "no finished episode".into()))?;
        give_string(out_json, serde_json::to_string(t).map_err(|err| invalid(err.to_string()))?)
    })
}

/// Abort any live episode and release containers. The handle stays valid
/// until [`eb_env_free`]; later calls fail with `EB_STATUS_LIFECYCLE`.
///
/// # Safety
/// `env` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn eb_env_close(env: *mut EbEnv) -> EbStatus {
    guard(|| Ok(env_mut(env)?.handle.close()?))
}

/// Close (if needed) and free a handle. Null is ignored.
///
/// # Safety
/// `env` is null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eb_env_free(env: *mut EbEnv) {
    if !env.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(env))));
    }
}

/// Gauss error function.
#[no_mangle]
pub extern "C" fn eb_erf(x: f64) -> f64 {
    gauss_erf(x)
}

/// TF-IDF cosine similarity of two texts.
///
/// # Safety
/// `a` and `b` are valid strings; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn eb_lexical_similarity(a: *const c_char, b: *const c_char, out: *mut f64) -> EbStatus {
    guard(|| {
        let (a, b) = (required(a, "a")?, required(b, "b")?);
        let out = out.as_mut().ok_or_else(|| Fail(EbStatus::NullArgument, "out is null".into()))?;
        *out = lexical_similarity(a, b);
        Ok(())
    })
}

/// Kendall's tau-b of `n` paired values. Fails with
/// `EB_STATUS_INVALID_ARGUMENT` when undefined (n < 2 or a constant side).
///
/// # Safety
/// `x` and `y` point to `n` readable doubles; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn eb_kendall_tau_b(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> EbStatus {
    guard(|| {
        if x.is_null() || y.is_null() || out.is_null() {
            return Err(Fail(EbStatus::NullArgument, "null pointer argument".into()));
        }
        let (x, y) = (std::slice::from_raw_parts(x, n), std::slice::from_raw_parts(y, n));
        *out = kendall_tau_b(x, y).ok_or_else(|| invalid("tau-b is undefined for these inputs"))?;
        Ok(())
    })
}

/// SQL reward of two result sets given as JSON
/// (`{"rows": [[{"t": "int", "v": 1}]], "error": null}`). Writes the total
/// to `out` and the breakdown JSON to `breakdown_json` when non-null.
///
/// # Safety
/// String arguments are valid strings; `out` is valid for a write;
/// `breakdown_json` is null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn eb_sql_reward(
    agent_json: *const c_char,
    gold_json: *const c_char,
    out: *mut f64,
    breakdown_json: *mut *mut c_char,
) -> EbStatus {
    guard(|| {
        let parse = |p, name| -> Result<ResultSet, Fail> {
            serde_json::from_str(required(p, name)?).map_err(|e| invalid(format!("{name}: {e}")))
        };
        let (agent, gold) = (parse(agent_json, "agent_json")?, parse(gold_json, "gold_json")?);
        let out = out.as_mut().ok_or_else(|| Fail(EbStatus::NullArgument, "out is null".into()))?;
        let b = sql_reward(&agent, &gold);
        *out = b.total;
        give_string(breakdown_json, serde_json::to_string(&b).map_err(|e| invalid(e.to_string()))?)
    })
}
