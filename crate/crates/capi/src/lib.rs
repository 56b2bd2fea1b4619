//! C bindings for the matcher, the error-rate metric, and whole pipeline
//! runs. Every call returns an `RxStatus`; on failure a thread-local
//! message is readable through `rxocr_last_error` until the next failing
//! call on the same thread. Strings returned through out-parameters are
//! owned by the caller and must go back through `rxocr_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rxocr_core::matcher::{
    decide, fuzzy_ratio, levenshtein, similarity, Lexicon, MatchStage, Thresholds,
};
use rxocr_core::metrics::cer;
use rxocr_core::pipeline::{parse_config, render_report, run_pipeline};
use rxocr_core::Error;

/// Result of every binding call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RxStatus {
    RxOk = 0,
    /// A required pointer argument was null.
    RxNullPointer = 1,
    /// A string argument was not valid UTF-8.
    RxBadUtf8 = 2,
    /// The operating system refused a read or write.
    RxIo = 3,
    /// A weight, lexicon, or image file was malformed.
    RxBadFormat = 4,
    /// Anything else: bad configuration, shapes, or ranges.
    RxInvalid = 5,
    /// The library caught an internal panic; state is still consistent.
    RxPanic = 6,
}

/// Loaded lexicon handle; create with `rxocr_lexicon_load`, release with
/// `rxocr_lexicon_free`.
pub struct RxLexicon(Lexicon);

/// One match decision. `stage` is 0 when rejected, 1 for the
/// edit-distance stage, 2 for the fuzzy fallback. `outcome` is the
/// accepted entry or the sentinel "no"; free it with `rxocr_string_free`.
#[repr(C)]
pub struct RxMatch {
    pub s_l: f64,
    pub s_f: f64,
    pub stage: i32,
    pub outcome: *mut c_char,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

fn fail(e: &Error) -> RxStatus {
    set_error(&e.to_string());
    match e {
        Error::Io { .. } => RxStatus::RxIo,
        Error::WeightFormat { .. } | Error::LexiconFormat { .. } | Error::ImageFormat { .. } => {
            RxStatus::RxBadFormat
        }
        _ => RxStatus::RxInvalid,
    }
}

fn guard(f: impl FnOnce() -> RxStatus) -> RxStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("internal panic");
        RxStatus::RxPanic
    })
}

/// # Safety
/// `p` must be null or point at a NUL-terminated string.
unsafe fn arg_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, RxStatus> {
    if p.is_null() {
        set_error(&format!("{what} is null"));
        return Err(RxStatus::RxNullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        RxStatus::RxBadUtf8
    })
}

fn out_slot<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, RxStatus> {
    if p.is_null() {
        set_error(&format!("{what} is null"));
        return Err(RxStatus::RxNullPointer);
    }
    Ok(unsafe { &mut *p })
}

fn give_string(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message for the most recent failure on this thread. Never null; empty
/// before any failure. Valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn rxocr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn rxocr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn rxocr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a lexicon file (one name per line, `#` comments allowed).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn rxocr_lexicon_load(
    path: *const c_char,
    out: *mut *mut RxLexicon,
) -> RxStatus {
    guard(|| {
        let path = match arg_str(path, "path") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let slot = match out_slot(out, "out") {
            Ok(s) => s,
            Err(st) => return st,
        };
        match Lexicon::load(path) {
            Ok(lex) => {
                *slot = Box::into_raw(Box::new(RxLexicon(lex)));
                RxStatus::RxOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a lexicon handle. Null is a no-op.
///
/// # Safety
/// `lex` must have come from `rxocr_lexicon_load` and not been freed.
#[no_mangle]
pub unsafe extern "C" fn rxocr_lexicon_free(lex: *mut RxLexicon) {
    if !lex.is_null() {
        drop(Box::from_raw(lex));
    }
}

/// Number of entries in the lexicon.
///
/// # Safety
/// `lex` must be a live handle; `out` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn rxocr_lexicon_len(lex: *const RxLexicon, out: *mut usize) -> RxStatus {
    guard(|| {
        if lex.is_null() {
            set_error("lex is null");
            return RxStatus::RxNullPointer;
        }
        match out_slot(out, "out") {
            Ok(slot) => {
                *slot = (*lex).0.len();
                RxStatus::RxOk
            }
            Err(st) => st,
        }
    })
}

/// Edit distance between two strings, by Unicode scalar.
///
/// # Safety
/// `a` and `b` must be NUL-terminated; `out` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn rxocr_levenshtein(
    a: *const c_char,
    b: *const c_char,
    out: *mut usize,
) -> RxStatus {
    guard(|| {
        match (arg_str(a, "a"), arg_str(b, "b"), out_slot(out, "out")) {
            (Ok(a), Ok(b), Ok(slot)) => {
                *slot = levenshtein(a, b);
                RxStatus::RxOk
            }
            (Err(st), _, _) | (_, Err(st), _) | (_, _, Err(st)) => st,
        }
    })
}

/// Edit-distance similarity on the 0..=100 scale.
///
/// # Safety
/// `a` and `b` must be NUL-terminated; `out` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn rxocr_similarity(
    a: *const c_char,
    b: *const c_char,
    out: *mut f64,
) -> RxStatus {
    guard(|| {
        match (arg_str(a, "a"), arg_str(b, "b"), out_slot(out, "out")) {
            (Ok(a), Ok(b), Ok(slot)) => {
                *slot = similarity(a, b);
                RxStatus::RxOk
            }
            (Err(st), _, _) | (_, Err(st), _) | (_, _, Err(st)) => st,
        }
    })
}

/// Matching-block similarity on the 0..=100 scale.
///
/// # Safety
/// `a` and `b` must be NUL-terminated; `out` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn rxocr_fuzzy_ratio(
    a: *const c_char,
    b: *const c_char,
    out: *mut f64,
) -> RxStatus {
    guard(|| {
        match (arg_str(a, "a"), arg_str(b, "b"), out_slot(out, "out")) {
            (Ok(a), Ok(b), Ok(slot)) => {
                *slot = fuzzy_ratio(a, b);
                RxStatus::RxOk
            }
            (Err(st), _, _) | (_, Err(st), _) | (_, _, Err(st)) => st,
        }
    })
}

/// Character error rate of `hypothesis` against `reference`.
/// Fails with `RxInvalid` when the reference is empty.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn rxocr_cer(
    reference: *const c_char,
    hypothesis: *const c_char,
    out: *mut f64,
) -> RxStatus {
    guard(|| {
        match (arg_str(reference, "reference"), arg_str(hypothesis, "hypothesis"), out_slot(out, "out")) {
            (Ok(r), Ok(h), Ok(slot)) => match cer(r, h) {
                Ok(v) => {
                    *slot = v;
                    RxStatus::RxOk
                }
                Err(e) => fail(&e),
            },
            (Err(st), _, _) | (_, Err(st), _) | (_, _, Err(st)) => st,
        }
    })
}

/// Match a query against the lexicon with the two-stage rule. On success
/// the caller owns `out.outcome`.
///
/// # Safety
/// `lex` must be a live handle, `query` NUL-terminated, `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn rxocr_decide(
    lex: *const RxLexicon,
    query: *const c_char,
    t_l: f64,
    t_f: f64,
    out: *mut RxMatch,
) -> RxStatus {
    guard(|| {
        if lex.is_null() {
            set_error("lex is null");
            return RxStatus::RxNullPointer;
        }
        let query = match arg_str(query, "query") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let slot = match out_slot(out, "out") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let th = Thresholds { t_l, t_f };
        if let Err(e) = th.validate() {
            return fail(&e);
        }
        let d = decide(&(*lex).0, query, th);
        *slot = RxMatch {
            s_l: d.s_l,
            s_f: d.s_f,
            stage: match d.stage {
                None => 0,
                Some(MatchStage::Levenshtein) => 1,
                Some(MatchStage::Fuzzy) => 2,
            },
            outcome: give_string(&d.outcome),
        };
        RxStatus::RxOk
    })
}

/// Run the whole pipeline from a JSON configuration (the same schema the
/// CLI accepts) and hand back the rendered JSON report. The caller owns
/// `out_report`. Per-image failures are listed inside the report; only
/// configuration or I/O problems fail the call.
///
/// # Safety
/// `config_json` must be NUL-terminated; `out_report` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn rxocr_pipeline_run(
    config_json: *const c_char,
    out_report: *mut *mut c_char,
) -> RxStatus {
    guard(|| {
        let text = match arg_str(config_json, "config_json") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let slot = match out_slot(out_report, "out_report") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let rendered = parse_config(text)
            .and_then(|cfg| run_pipeline(&cfg))
            .and_then(|r| render_report(&r));
        match rendered {
            Ok(json) => {
                *slot = give_string(&json);
                RxStatus::RxOk
            }
            Err(e) => fail(&e),
        }
    })
}
