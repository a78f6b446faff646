//! C ABI over the rulesmith rule compiler, matcher, text distance and
//! confusion metrics.
//!
//! Every function returns an [`RsStatus`]; on anything but `RS_STATUS_OK` the
//! message is available from [`rs_last_error`] on the same thread. Strings
//! handed out by the library are NUL-terminated UTF-8 and must be released
//! with [`rs_string_free`]. Rule sets are opaque and released with
//! [`rs_ruleset_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rulesmith::analytics::Metrics;
use rulesmith::corpus::SourceFile;
use rulesmith::matcher::{Matcher, MatcherConfig};
use rulesmith::rule::{Rule, RuleFormat};
use rulesmith::textdist;
use rulesmith::validator::{compile_bytes, CompileError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// The rule did not compile; the error list is still written out.
    CompileFailed = 3,
    InvalidArgument = 4,
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsFormat {
    Yara = 0,
    Semgrep = 1,
}

impl From<RsFormat> for RuleFormat {
    fn from(f: RsFormat) -> Self {
        match f {
            RsFormat::Yara => RuleFormat::Yara,
            RsFormat::Semgrep => RuleFormat::Semgrep,
        }
    }
}

/// Confusion metrics. Ratios with a zero denominator are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Compiled rules ready for scanning.
pub struct RsRuleSet {
    rules: Vec<Rule>,
    matcher: Option<Matcher>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: RsStatus, msg: impl Into<String>) -> RsStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `RS_STATUS_INTERNAL` and clearing the last error on success.
fn guard(f: impl FnOnce() -> RsStatus) -> RsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == RsStatus::Ok {
                set_error("");
            }
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            fail(RsStatus::Internal, msg)
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, RsStatus> {
    if p.is_null() {
        return Err(fail(RsStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), RsStatus> {
    if out.is_null() {
        return Ok(());
    }
    let c = CString::new(s).map_err(|_| fail(RsStatus::Internal, "output contains NUL"))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn write_json<T: serde::Serialize>(
    out: *mut *mut c_char,
    value: &T,
) -> Result<(), RsStatus> {
    let s = serde_json::to_string(value).map_err(|e| fail(RsStatus::Internal, e.to_string()))?;
    write_string(out, s)
}

unsafe fn bytes<'a>(data: *const u8, len: usize, what: &str) -> Result<&'a [u8], RsStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(fail(RsStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn rs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn rs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Compiles `len` bytes of rule text and writes the error list as a JSON
/// array to `*errors_json` (`[]` when the rule compiles). Returns
/// `RS_STATUS_COMPILE_FAILED` when there are errors.
///
/// # Safety
/// `data` must point to `len` readable bytes; `errors_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn rs_validate(
    data: *const u8,
    len: usize,
    format: RsFormat,
    errors_json: *mut *mut c_char,
) -> RsStatus {
    guard(|| {
        let input = match bytes(data, len, "data") {
            Ok(b) => b,
            Err(s) => return s,
        };
        let errors = compile_bytes(input, format.into())
            .err()
            .unwrap_or_default();
        if let Err(s) = write_json(errors_json, &errors) {
            return s;
        }
        if errors.is_empty() {
            RsStatus::Ok
        } else {
            fail(RsStatus::CompileFailed, errors[0].message.clone())
        }
    })
}

/// New empty rule set.
#[no_mangle]
pub extern "C" fn rs_ruleset_new() -> *mut RsRuleSet {
    Box::into_raw(Box::new(RsRuleSet {
        rules: Vec::new(),
        matcher: None,
    }))
}

/// # Safety
/// `set` must come from [`rs_ruleset_new`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rs_ruleset_free(set: *mut RsRuleSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Compiles a rule and adds it to `set`. On `RS_STATUS_COMPILE_FAILED` the error
/// list is written to `*errors_json` and the set is unchanged.
///
/// # Safety
/// `set` must be live; `text` a NUL-terminated string; `errors_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn rs_ruleset_add(
    set: *mut RsRuleSet,
    text: *const c_char,
    format: RsFormat,
    errors_json: *mut *mut c_char,
) -> RsStatus {
    guard(|| {
        let Some(set) = set.as_mut() else {
            return fail(RsStatus::NullArgument, "set is null");
        };
        if text.is_null() {
            return fail(RsStatus::NullArgument, "text is null");
        }
        let raw = CStr::from_ptr(text).to_bytes();
        match compile_bytes(raw, format.into()) {
            Ok(rule) => {
                if let Err(s) = write_json(errors_json, &Vec::<CompileError>::new()) {
                    return s;
                }
                set.rules.push(rule);
                set.matcher = None;
                RsStatus::Ok
            }
            Err(errors) => {
                if let Err(s) = write_json(errors_json, &errors) {
                    return s;
                }
                fail(RsStatus::CompileFailed, errors[0].message.clone())
            }
        }
    })
}

/// Number of rules in `set`, 0 for null.
///
/// # Safety
/// `set` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn rs_ruleset_len(set: *const RsRuleSet) -> usize {
    set.as_ref().map_or(0, |s| s.rules.len())
}

/// Scans one file and writes `{"matches": [...], "issues": [...]}` to
/// `*result_json`.
///
/// # Safety
/// `set` must be live; `package` and `path` NUL-terminated; `data` must
/// point to `len` readable bytes; `result_json` must not be null.
#[no_mangle]
pub unsafe extern "C" fn rs_scan(
    set: *mut RsRuleSet,
    package: *const c_char,
    path: *const c_char,
    data: *const u8,
    len: usize,
    result_json: *mut *mut c_char,
) -> RsStatus {
    guard(|| {
        let Some(set) = set.as_mut() else {
            return fail(RsStatus::NullArgument, "set is null");
        };
        if result_json.is_null() {
            return fail(RsStatus::NullArgument, "result_json is null");
        }
        let (package, path, content) = match (
            c_str(package, "package"),
            c_str(path, "path"),
            bytes(data, len, "data"),
        ) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
        let rules = &set.rules;
        let matcher = set
            .matcher
            .get_or_insert_with(|| Matcher::new(rules, MatcherConfig::default()));
        let scan = matcher.scan_file(package, &SourceFile::from_bytes(path, content));
        match write_json(result_json, &scan) {
            Ok(()) => RsStatus::Ok,
            Err(s) => s,
        }
    })
}

/// Character-level edit distance.
///
/// # Safety
/// `a` and `b` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rs_levenshtein(
    a: *const c_char,
    b: *const c_char,
    out: *mut usize,
) -> RsStatus {
    guard(|| {
        if out.is_null() {
            return fail(RsStatus::NullArgument, "out is null");
        }
        match (c_str(a, "a"), c_str(b, "b")) {
            (Ok(a), Ok(b)) => {
                *out = textdist::levenshtein(a, b);
                RsStatus::Ok
            }
            (Err(s), _) | (_, Err(s)) => s,
        }
    })
}

/// Normalized similarity in `[0, 1]`.
///
/// # Safety
/// `a` and `b` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rs_similarity(
    a: *const c_char,
    b: *const c_char,
    out: *mut f64,
) -> RsStatus {
    guard(|| {
        if out.is_null() {
            return fail(RsStatus::NullArgument, "out is null");
        }
        match (c_str(a, "a"), c_str(b, "b")) {
            (Ok(a), Ok(b)) => {
                *out = textdist::similarity(a, b);
                RsStatus::Ok
            }
            (Err(s), _) | (_, Err(s)) => s,
        }
    })
}

/// Metrics from confusion counts. All-zero counts are `RS_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rs_confusion_metrics(
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
    out: *mut RsMetrics,
) -> RsStatus {
    guard(|| {
        if out.is_null() {
            return fail(RsStatus::NullArgument, "out is null");
        }
        match Metrics::from_counts(tp, fp, tn, fn_) {
            Ok(m) => {
                *out = RsMetrics {
                    accuracy: m.accuracy,
                    precision: m.precision.unwrap_or(f64::NAN),
                    recall: m.recall.unwrap_or(f64::NAN),
                    f1: m.f1.unwrap_or(f64::NAN),
                };
                RsStatus::Ok
            }
            Err(e) => fail(RsStatus::InvalidArgument, e.to_string()),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn last_error_cleared_on_success() {
        let mut out = 0usize;
        let st = unsafe { rs_levenshtein(ptr::null(), c"x".as_ptr(), &mut out) };
        assert_eq!(st, RsStatus::NullArgument);
        let msg = unsafe { CStr::from_ptr(rs_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "a is null");
        let st = unsafe { rs_levenshtein(c"kitten".as_ptr(), c"sitting".as_ptr(), &mut out) };
        assert_eq!((st, out), (RsStatus::Ok, 3));
        assert!(unsafe { CStr::from_ptr(rs_last_error()) }
            .to_bytes()
            .is_empty());
    }
}
