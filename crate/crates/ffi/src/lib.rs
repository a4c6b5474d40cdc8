//! C interface to the metric oracle, inference-time selection and stored
//! prompt pools.
//!
//! Every function returns an [`MpStatus`]. Objects cross the boundary as
//! opaque handles that must be released with the matching `*_free` call.
//! After a non-`Ok` status, [`mp_last_error`] copies a message describing
//! the failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use modalprompt::evaluation::{AccuracyMatrix, MetricReport};
use modalprompt::fixtures;
use modalprompt::guidance::{Score, ScoreRule};
use modalprompt::prompt_store::PromptStore;
use modalprompt::selection::{prefix_token_count, select_eval};
use modalprompt::{Error, TaskId};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Shape = 5,
    UndefinedMetric = 6,
    /// A fixture comparison ran and found mismatches.
    CheckFailed = 7,
    BufferTooSmall = 8,
    Internal = 99,
}

/// Accuracy matrix being filled row by row.
pub struct MpMatrix(AccuracyMatrix);

/// Metrics computed from a complete matrix.
pub struct MpReport(MetricReport);

/// A prompt pool loaded from disk.
pub struct MpStore(PromptStore);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> MpStatus {
    match e {
        Error::Parse { .. } | Error::Schema { .. } | Error::Json(_) => MpStatus::Parse,
        Error::Io { .. } => MpStatus::Io,
        Error::Shape(_) | Error::Ordering { .. } | Error::Capacity(_) => MpStatus::Shape,
        Error::UndefinedMetric(_) => MpStatus::UndefinedMetric,
        Error::Config(_) | Error::Input(_) | Error::Lookup(_) => MpStatus::InvalidArgument,
        _ => MpStatus::Internal,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (MpStatus, String)>) -> MpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MpStatus::Internal
        }
    }
}

fn lib<T>(r: modalprompt::Result<T>) -> Result<T, (MpStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MpStatus, String) {
    (MpStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MpStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(
    p: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], (MpStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (MpStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mp_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates an empty matrix over `n_tasks` tasks named `t1..tN`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mp_matrix_new(n_tasks: usize, out: *mut *mut MpMatrix) -> MpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n_tasks == 0 {
            return Err((
                MpStatus::InvalidArgument,
                "a matrix needs at least one task".into(),
            ));
        }
        let names = (1..=n_tasks).map(|i| format!("t{i}")).collect();
        *out = Box::into_raw(Box::new(MpMatrix(AccuracyMatrix::new(names))));
        Ok(())
    })
}

/// Parses a CSV matrix (header of task names, lower-triangular rows).
///
/// # Safety
/// `csv` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mp_matrix_from_csv(
    csv: *const c_char,
    out: *mut *mut MpMatrix,
) -> MpStatus {
    guard(|| {
        let text = str_arg(csv, "csv")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MpMatrix(lib(AccuracyMatrix::from_csv(text))?)));
        Ok(())
    })
}

/// Loads one of the shipped reference matrices by name.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mp_matrix_fixture(
    name: *const c_char,
    out: *mut *mut MpMatrix,
) -> MpStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MpMatrix(lib(fixtures::fixture_matrix(name))?)));
        Ok(())
    })
}

/// Appends the next stage row; its length must equal the stage number.
///
/// # Safety
/// `m` must come from this library; `values` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mp_matrix_push_row(
    m: *mut MpMatrix,
    values: *const f64,
    len: usize,
) -> MpStatus {
    guard(|| {
        let m = out_arg(m, "matrix")?;
        let row = slice_arg(values, len, "values")?.to_vec();
        lib(m.0.push_row(row))
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_matrix_free(m: *mut MpMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Computes Last, Avg, B and M from a complete matrix.
///
/// # Safety
/// `m` must be a live matrix handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mp_report_new(m: *const MpMatrix, out: *mut *mut MpReport) -> MpStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("matrix"))?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MpReport(lib(MetricReport::from_matrix(&m.0))?)));
        Ok(())
    })
}

/// Reads one value by key: `last.i`, `avg.i` (task i, 1-based), `bwt.t`,
/// `ma.t` (stage t ≥ 2), or `<metric>.mean`.
///
/// # Safety
/// `r` must be a live report handle, `key` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mp_report_value(
    r: *const MpReport,
    key: *const c_char,
    out: *mut f64,
) -> MpStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("report"))?;
        let key = str_arg(key, "key")?;
        let out = out_arg(out, "out")?;
        *out = fixtures::report_value(&r.0, key).ok_or_else(|| {
            (
                MpStatus::InvalidArgument,
                format!("no value for key `{key}`"),
            )
        })?;
        Ok(())
    })
}

/// Compares a report with a shipped fixture's reference values. Writes the
/// number of mismatching values to `n_failed` and returns `CheckFailed` when
/// it is non-zero.
///
/// # Safety
/// `r` must be a live report handle, `name` NUL-terminated, `n_failed` valid.
#[no_mangle]
pub unsafe extern "C" fn mp_report_check_fixture(
    r: *const MpReport,
    name: *const c_char,
    n_failed: *mut usize,
) -> MpStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("report"))?;
        let name = str_arg(name, "name")?;
        let n_failed = out_arg(n_failed, "n_failed")?;
        let checks = lib(fixtures::check_report(name, &r.0))?;
        let bad: Vec<String> = checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.key.clone())
            .collect();
        *n_failed = bad.len();
        if bad.is_empty() {
            Ok(())
        } else {
            Err((
                MpStatus::CheckFailed,
                format!("mismatching values: {}", bad.join(", ")),
            ))
        }
    })
}

/// # Safety
/// `r` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_report_free(r: *mut MpReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Top-`k` task selection from per-task image and text similarities.
/// Task `i` of the input arrays has id `i + 1`. Chosen ids are written to
/// `out_ids` in ascending order; `out_len` receives how many.
///
/// # Safety
/// `image_sim` and `text_sim` must hold `n_tasks` doubles; `out_ids` must
/// hold `cap` slots; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_select(
    image_sim: *const f64,
    text_sim: *const f64,
    n_tasks: usize,
    k: usize,
    image_weight: f64,
    text_weight: f64,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> MpStatus {
    guard(|| {
        let a = slice_arg(image_sim, n_tasks, "image_sim")?;
        let b = slice_arg(text_sim, n_tasks, "text_sim")?;
        let out_len = out_arg(out_len, "out_len")?;
        let scores = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(i, (&alpha, &beta))| (TaskId(i as u32 + 1), Score { alpha, beta }))
            .collect();
        let rule = ScoreRule {
            image_weight,
            text_weight,
        };
        let chosen = lib(select_eval(&scores, k, &rule))?.chosen;
        *out_len = chosen.len();
        if cap < chosen.len() {
            return Err((
                MpStatus::BufferTooSmall,
                format!("need {} slots, got {cap}", chosen.len()),
            ));
        }
        if out_ids.is_null() {
            return Err(null("out_ids"));
        }
        for (i, id) in chosen.iter().enumerate() {
            *out_ids.add(i) = id.0;
        }
        Ok(())
    })
}

/// Prefix length in tokens for `k` routed sets of `prompt_len` rows out of `n_tasks`.
#[no_mangle]
pub extern "C" fn mp_prefix_tokens(prompt_len: usize, k: usize, n_tasks: usize) -> usize {
    prefix_token_count(prompt_len, k, n_tasks)
}

/// Loads a prompt pool written by the `train` command.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mp_store_load(path: *const c_char, out: *mut *mut MpStore) -> MpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MpStore(lib(PromptStore::load(Path::new(path)))?)));
        Ok(())
    })
}

/// Number of prompt sets and rows per set.
///
/// # Safety
/// `s` must be a live store handle; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn mp_store_shape(
    s: *const MpStore,
    n_tasks: *mut usize,
    prompt_len: *mut usize,
) -> MpStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("store"))?;
        *out_arg(n_tasks, "n_tasks")? = s.0.n_tasks();
        *out_arg(prompt_len, "prompt_len")? = s.0.prompt_len;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_store_free(s: *mut MpStore) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
