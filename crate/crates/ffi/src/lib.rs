//! C ABI over the experiment runner.
//!
//! Every fallible call returns a [`CiaStatus`]; on failure the message is
//! available from [`cia_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Strings handed out by
//! the library are released with [`cia_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use cia_bench::report::RunReport;
use cia_bench::runner::{run_cells, DatasetCache, ExperimentConfig};
use cia_bench::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CiaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed or inconsistent configuration.
    Config = 3,
    /// A dataset file is missing; the message says how to fetch it.
    MissingDataset = 4,
    /// Index out of range.
    OutOfRange = 5,
    Io = 6,
    /// Training or attack failure.
    Runtime = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

/// A parsed and validated experiment config.
pub struct CiaExperiment {
    config: ExperimentConfig,
}

/// The result of running an experiment: one report per cell.
pub struct CiaReport {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(CiaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => CiaStatus::Config,
            Error::MissingDataset { .. } => CiaStatus::MissingDataset,
            Error::Io { .. } => CiaStatus::Io,
            _ => CiaStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

/// Runs `f`, turning errors and panics into a status plus the last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CiaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CiaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CiaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(CiaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CiaStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(CiaStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(CiaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

fn checked(config: ExperimentConfig) -> Result<Box<CiaExperiment>, Fail> {
    config
        .validate()
        .map_err(|d| Fail(CiaStatus::Config, format!("config is invalid:\n{d}")))?;
    Ok(Box::new(CiaExperiment { config }))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn cia_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cia_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cia_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a TOML or JSON config from a file. Relative dataset manifest
/// paths resolve against the file's directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cia_experiment_from_file(path: *const c_char, out: *mut *mut CiaExperiment) -> CiaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = str_arg(path, "path")?;
        let exp = checked(ExperimentConfig::from_file(Path::new(path))?)?;
        *out = Box::into_raw(exp);
        Ok(())
    })
}

/// Parses a TOML config held in memory. The dataset must be inline or
/// given by an absolute manifest path.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cia_experiment_from_toml(toml: *const c_char, out: *mut *mut CiaExperiment) -> CiaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let text = str_arg(toml, "toml")?;
        let exp = checked(ExperimentConfig::from_toml_str(text)?)?;
        *out = Box::into_raw(exp);
        Ok(())
    })
}

/// Number of cells the config expands to.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cia_experiment_n_cells(exp: *const CiaExperiment, out: *mut usize) -> CiaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let exp = handle(exp, "experiment")?;
        *out = exp.config.expand(0)?.len();
        Ok(())
    })
}

/// Runs every cell. `data_root` may be null to use `CIA_BENCH_DATA` or
/// `./data`; `out_dir` may be null to keep the report in memory only.
///
/// # Safety
/// `exp` must be a live handle; string arguments must be null or
/// NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cia_experiment_run(
    exp: *const CiaExperiment,
    data_root: *const c_char,
    seed_offset: u64,
    out_dir: *const c_char,
    out: *mut *mut CiaReport,
) -> CiaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let exp = handle(exp, "experiment")?;
        let root = if data_root.is_null() {
            cia_bench::runner::data_root_from_env()
        } else {
            PathBuf::from(str_arg(data_root, "data_root")?)
        };
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(out_dir, "out_dir")?))
        };
        let cells = exp.config.expand(seed_offset)?;
        let mut cache = DatasetCache::new(Some(root));
        let report = run_cells(&cells, &mut cache, dir.as_deref())?;
        *out = Box::into_raw(Box::new(CiaReport { report }));
        Ok(())
    })
}

/// Releases an experiment handle. Null is ignored.
///
/// # Safety
/// `exp` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cia_experiment_free(exp: *mut CiaExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Whether every cell ran to completion.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cia_report_complete(report: *const CiaReport, out: *mut bool) -> CiaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = handle(report, "report")?.report.complete;
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cia_report_n_cells(report: *const CiaReport, out: *mut usize) -> CiaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = handle(report, "report")?.report.cells.len();
        Ok(())
    })
}

/// Headline numbers of one cell, as fractions. `NaN` marks a value the
/// cell did not produce.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CiaCellSummary {
    pub max_aac: f64,
    pub best10: f64,
    pub random_bound: f64,
    pub upper_bound: f64,
    pub utility: f64,
    pub complete: bool,
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cia_report_cell_summary(
    report: *const CiaReport,
    index: usize,
    out: *mut CiaCellSummary,
) -> CiaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let r = &handle(report, "report")?.report;
        let cell = r.cells.get(index).ok_or_else(|| {
            Fail(CiaStatus::OutOfRange, format!("cell {index} of {}", r.cells.len()))
        })?;
        let b = &cell.body;
        let cia = b.cia.as_ref();
        let get = |f: fn(&cia_bench::metrics::AttackSummary) -> f64| cia.map_or(f64::NAN, f);
        *out = CiaCellSummary {
            max_aac: get(|s| s.max_aac),
            best10: get(|s| s.best10),
            random_bound: get(|s| s.random_bound),
            upper_bound: get(|s| s.upper_bound),
            utility: b.final_utility.unwrap_or(f64::NAN),
            complete: b.complete,
        };
        Ok(())
    })
}

/// The full report as JSON. Free the string with [`cia_string_free`].
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cia_report_to_json(report: *const CiaReport, out: *mut *mut c_char) -> CiaStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let r = &handle(report, "report")?.report;
        let json = serde_json::to_string_pretty(r).map_err(|e| Fail(CiaStatus::Runtime, e.to_string()))?;
        *out = to_c_string(json);
        Ok(())
    })
}

/// Writes `report.json` and `summary.csv` into `dir`.
///
/// # Safety
/// `report` must be a live handle; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cia_report_write(report: *const CiaReport, dir: *const c_char) -> CiaStatus {
    guard(|| {
        let r = &handle(report, "report")?.report;
        r.write(Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Releases a report handle. Null is ignored.
///
/// # Safety
/// `report` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cia_report_free(report: *mut CiaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_maps_errors_and_panics() {
        assert_eq!(guard(|| Ok(())), CiaStatus::Ok);
        assert!(cia_last_error().is_null());

        let s = guard(|| Err(Error::Config("bad K".into()).into()));
        assert_eq!(s, CiaStatus::Config);
        let msg = unsafe { CStr::from_ptr(cia_last_error()) }.to_str().unwrap();
        assert!(msg.contains("bad K"));

        let s = guard(|| panic!("boom"));
        assert_eq!(s, CiaStatus::Panic);
        let msg = unsafe { CStr::from_ptr(cia_last_error()) }.to_str().unwrap();
        assert!(msg.contains("boom"));

        // a later success clears the message
        assert_eq!(guard(|| Ok(())), CiaStatus::Ok);
        assert!(cia_last_error().is_null());
    }

    #[test]
    fn interior_nul_does_not_lose_the_message() {
        set_error("a\0b");
        let msg = unsafe { CStr::from_ptr(cia_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "a b");
    }
}
