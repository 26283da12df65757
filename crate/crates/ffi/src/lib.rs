//! C ABI for running continual semi-supervised experiments and computing
//! their summary metrics.
//!
//! Handles are opaque pointers created by a `*_new` or `*_load` call and
//! released with the matching `*_free`. Every fallible call returns a
//! [`MetaclStatus`]; on failure a description is available from
//! [`metacl_last_error`] on the same thread until the next failing call.
//! Output pointers are written only on success.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use metacl::bench::config::ExperimentConfig;
use metacl::bench::metrics::AccuracyMatrix;
use metacl::bench::stream::TaskStream;
use metacl::runtime::{ExperimentState, Method};
use metacl::Error;

/// Outcome of a call. Zero is success; every other value names the kind of failure.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaclStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Bad configuration, method name or option value.
    Config = 3,
    /// The call was made in the wrong order or with an out-of-range index.
    Contract = 4,
    /// Dataset contents could not be used.
    Data = 5,
    /// A binary container or checkpoint was malformed.
    Format = 6,
    /// Reading or writing a file failed.
    Io = 7,
    /// Internal tensor shapes disagreed.
    Shape = 8,
    /// A computation produced a non-finite value.
    Numeric = 9,
    /// The library panicked; the handle involved should be freed and not reused.
    Panic = 10,
}

/// A running or finished experiment together with its task stream.
pub struct MetaclExperiment {
    state: ExperimentState,
    stream: TaskStream,
}

/// An accuracy matrix built row by row from the caller's numbers.
pub struct MetaclMatrix {
    inner: AccuracyMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: MetaclStatus,
    message: String,
}

impl Failure {
    fn new(status: MetaclStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => MetaclStatus::Shape,
            Error::Contract(_) => MetaclStatus::Contract,
            Error::Numeric(_) => MetaclStatus::Numeric,
            Error::Format(_) => MetaclStatus::Format,
            Error::Config(_) => MetaclStatus::Config,
            Error::Data(_) => MetaclStatus::Data,
            Error::Io { .. } => MetaclStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Run `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MetaclStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MetaclStatus::Ok,
        Ok(Err(f)) => {
            set_last_error(f.message);
            f.status
        }
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {what}"));
            MetaclStatus::Panic
        }
    }
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(MetaclStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(MetaclStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn arg_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(MetaclStatus::NullPointer, format!("{name} is null")))
}

unsafe fn arg_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(MetaclStatus::NullPointer, format!("{name} is null")))
}

fn parse_method(name: &str) -> Result<Method, Failure> {
    Ok(name.parse::<Method>()?)
}

fn boxed_experiment(config: ExperimentConfig, method: Method) -> Result<*mut MetaclExperiment, Failure> {
    let stream = config.build_stream()?;
    let state = ExperimentState::new(config, method, &stream)?;
    Ok(Box::into_raw(Box::new(MetaclExperiment { state, stream })))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn metacl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn metacl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Create an experiment on the built-in `blobs8` stream with `labelled`
/// labelled items per task. `method` is `mcssl`, `single-ssl` or `ewc-ssl`.
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_new_blobs8(
    seed: u64,
    labelled: usize,
    method: *const c_char,
    out: *mut *mut MetaclExperiment,
) -> MetaclStatus {
    guard(|| {
        let method = parse_method(arg_str(method, "method")?)?;
        let out = arg_mut(out, "out")?;
        *out = boxed_experiment(ExperimentConfig::blobs8(seed, labelled), method)?;
        Ok(())
    })
}

/// Create an experiment from a JSON configuration document.
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_new_from_json(
    config_json: *const c_char,
    method: *const c_char,
    out: *mut *mut MetaclExperiment,
) -> MetaclStatus {
    guard(|| {
        let config = ExperimentConfig::from_json(arg_str(config_json, "config_json")?)?;
        let method = parse_method(arg_str(method, "method")?)?;
        let out = arg_mut(out, "out")?;
        *out = boxed_experiment(config, method)?;
        Ok(())
    })
}

/// Reopen an experiment saved with [`metacl_experiment_save`].
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_load(dir: *const c_char, out: *mut *mut MetaclExperiment) -> MetaclStatus {
    guard(|| {
        let dir = PathBuf::from(arg_str(dir, "dir")?);
        let out = arg_mut(out, "out")?;
        let (state, stream) = ExperimentState::load(&dir)?;
        *out = Box::into_raw(Box::new(MetaclExperiment { state, stream }));
        Ok(())
    })
}

/// Write the experiment's state into `dir`, creating it if needed.
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_save(exp: *const MetaclExperiment, dir: *const c_char) -> MetaclStatus {
    guard(|| {
        let exp = arg_ref(exp, "exp")?;
        exp.state.save(&PathBuf::from(arg_str(dir, "dir")?))?;
        Ok(())
    })
}

/// Learn and evaluate the next task. Sets `*finished` when no task remains
/// afterwards; calling again once finished is a no-op.
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_step(exp: *mut MetaclExperiment, finished: *mut bool) -> MetaclStatus {
    guard(|| {
        let exp = arg_mut(exp, "exp")?;
        let finished = arg_mut(finished, "finished")?;
        let next = exp.state.next_task + 1;
        exp.state.run_until(&exp.stream, next, None)?;
        *finished = exp.state.is_finished();
        Ok(())
    })
}

/// Learn and evaluate every remaining task.
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_run(exp: *mut MetaclExperiment) -> MetaclStatus {
    guard(|| {
        let exp = arg_mut(exp, "exp")?;
        exp.state.run_to_end(&exp.stream, None)?;
        Ok(())
    })
}

/// Number of tasks in the stream and number learned so far.
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_progress(
    exp: *const MetaclExperiment,
    num_tasks: *mut usize,
    learned: *mut usize,
) -> MetaclStatus {
    guard(|| {
        let exp = arg_ref(exp, "exp")?;
        let num_tasks = arg_mut(num_tasks, "num_tasks")?;
        let learned = arg_mut(learned, "learned")?;
        *num_tasks = exp.state.num_tasks;
        *learned = exp.state.next_task;
        Ok(())
    })
}

/// Accuracy on task `j` after learning task `k` (both from zero, `j <= k`).
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_accuracy(
    exp: *const MetaclExperiment,
    k: usize,
    j: usize,
    out: *mut f64,
) -> MetaclStatus {
    guard(|| {
        let exp = arg_ref(exp, "exp")?;
        let out = arg_mut(out, "out")?;
        *out = exp
            .state
            .matrix
            .get(k, j)
            .ok_or_else(|| Failure::new(MetaclStatus::Contract, format!("no accuracy recorded at ({k}, {j})")))?;
        Ok(())
    })
}

/// Average accuracy and average forgetting over the rows recorded so far.
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_summary(
    exp: *const MetaclExperiment,
    avg_accuracy: *mut f64,
    avg_forgetting: *mut f64,
) -> MetaclStatus {
    guard(|| {
        let exp = arg_ref(exp, "exp")?;
        summary(&exp.state.matrix, avg_accuracy, avg_forgetting)
    })
}

/// Release an experiment. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn metacl_experiment_free(exp: *mut MetaclExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// An empty accuracy matrix. Never null.
#[no_mangle]
pub extern "C" fn metacl_matrix_new() -> *mut MetaclMatrix {
    Box::into_raw(Box::new(MetaclMatrix {
        inner: AccuracyMatrix::new(),
    }))
}

/// Append the next row; row `k` (from zero) must hold `k + 1` values in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn metacl_matrix_push_row(m: *mut MetaclMatrix, values: *const f64, len: usize) -> MetaclStatus {
    guard(|| {
        let m = arg_mut(m, "matrix")?;
        if values.is_null() && len > 0 {
            return Err(Failure::new(MetaclStatus::NullPointer, "values is null"));
        }
        let row = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(values, len).to_vec()
        };
        m.inner.push_row(row)?;
        Ok(())
    })
}

/// Average accuracy and average forgetting of the matrix.
#[no_mangle]
pub unsafe extern "C" fn metacl_matrix_summary(
    m: *const MetaclMatrix,
    avg_accuracy: *mut f64,
    avg_forgetting: *mut f64,
) -> MetaclStatus {
    guard(|| summary(&arg_ref(m, "matrix")?.inner, avg_accuracy, avg_forgetting))
}

/// Release a matrix. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn metacl_matrix_free(m: *mut MetaclMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

unsafe fn summary(m: &AccuracyMatrix, avg_accuracy: *mut f64, avg_forgetting: *mut f64) -> Result<(), Failure> {
    let a_out = arg_mut(avg_accuracy, "avg_accuracy")?;
    let f_out = arg_mut(avg_forgetting, "avg_forgetting")?;
    let (a, f) = (m.avg_accuracy()?, m.avg_forgetting()?);
    *a_out = a;
    *f_out = f;
    Ok(())
}
