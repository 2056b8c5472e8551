//! C ABI over the `amtl` corrector.
//!
//! Every function returns an [`AmtlStatus`]. On failure the message is kept
//! per thread and read back with [`amtl_last_error_message`]. Strings handed
//! out by the library must be released with [`amtl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use amtl::corrector::{correct, correct_fast, CorrectionModel, CorrectorConfig};
use amtl::model::{Group, ModelState};
use amtl::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmtlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    BadCheckpoint = 4,
    InvalidInput = 5,
    BufferTooSmall = 6,
    Config = 7,
    Internal = 8,
}

/// Loaded checkpoint plus search settings. Opaque to C callers.
pub struct AmtlModel {
    state: ModelState,
    search: CorrectorConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AmtlStatus {
    match e {
        Error::Io { .. } => AmtlStatus::Io,
        Error::Corrupt(_) | Error::Version { .. } => AmtlStatus::BadCheckpoint,
        Error::Config(_) => AmtlStatus::Config,
        Error::InvalidInput(_)
        | Error::UnknownSymbol(_)
        | Error::TooLong { .. }
        | Error::TooShort { .. } => AmtlStatus::InvalidInput,
        _ => AmtlStatus::Internal,
    }
}

fn fail(status: AmtlStatus, msg: impl Into<String>) -> AmtlStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping errors and panics to a status.
fn guard(f: impl FnOnce() -> Result<(), AmtlStatus>) -> AmtlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmtlStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(AmtlStatus::Internal, "panic inside amtl"),
    }
}

fn lift<T>(r: amtl::Result<T>) -> Result<T, AmtlStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, AmtlStatus> {
    if p.is_null() {
        return Err(fail(AmtlStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(AmtlStatus::InvalidUtf8, e.to_string()))
}

unsafe fn model_ref<'a>(m: *const AmtlModel) -> Result<&'a AmtlModel, AmtlStatus> {
    m.as_ref()
        .ok_or_else(|| fail(AmtlStatus::NullPointer, "null model handle"))
}

/// Loads a checkpoint. On success `*out` owns a handle for [`amtl_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amtl_model_load(
    path: *const c_char,
    out: *mut *mut AmtlModel,
) -> AmtlStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(AmtlStatus::NullPointer, "null output pointer"));
        }
        *out = ptr::null_mut();
        let path = read_str(path)?;
        let state = lift(ModelState::load(Path::new(path)))?;
        let m = Box::new(AmtlModel {
            state,
            search: CorrectorConfig::default(),
        });
        *out = Box::into_raw(m);
        Ok(())
    })
}

/// Replaces the policy head with the one stored in another checkpoint.
///
/// # Safety
/// `model` must come from [`amtl_model_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn amtl_model_load_policy(
    model: *mut AmtlModel,
    path: *const c_char,
) -> AmtlStatus {
    guard(|| {
        let m = model
            .as_mut()
            .ok_or_else(|| fail(AmtlStatus::NullPointer, "null model handle"))?;
        let path = read_str(path)?;
        let other = lift(ModelState::load(Path::new(path)))?;
        lift(m.state.copy_group_from(&other, Group::Policy))
    })
}

/// Sets the search width and depth used by [`amtl_correct`].
///
/// # Safety
/// `model` must come from [`amtl_model_load`].
#[no_mangle]
pub unsafe extern "C" fn amtl_model_set_search(
    model: *mut AmtlModel,
    width: usize,
    depth: usize,
) -> AmtlStatus {
    guard(|| {
        let m = model
            .as_mut()
            .ok_or_else(|| fail(AmtlStatus::NullPointer, "null model handle"))?;
        m.search.width = width;
        m.search.depth = depth;
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`amtl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn amtl_model_free(model: *mut AmtlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Corrects one sentence. `fast` nonzero uses the policy span.
/// On success `*out` is a new string for [`amtl_string_free`].
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn amtl_correct(
    model: *const AmtlModel,
    text: *const c_char,
    fast: i32,
    out: *mut *mut c_char,
) -> AmtlStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(AmtlStatus::NullPointer, "null output pointer"));
        }
        *out = ptr::null_mut();
        let m = model_ref(model)?;
        let text = read_str(text)?;
        let seq = lift(m.state.vocab().encode(text))?;
        let fixed = if fast != 0 {
            lift(correct_fast(&seq, &m.state, &m.search))?
        } else {
            lift(correct(&seq, &m.state, &m.search))?
        };
        let s = lift(m.state.vocab().decode(&fixed))?;
        let c = CString::new(s).map_err(|e| fail(AmtlStatus::Internal, e.to_string()))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// Writes per-token wrongness probabilities into `scores[0..cap]`.
/// `*len` always receives the sentence length; a short buffer yields
/// `BufferTooSmall` without writing scores.
///
/// # Safety
/// `scores` must hold `cap` doubles (may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn amtl_score(
    model: *const AmtlModel,
    text: *const c_char,
    scores: *mut f64,
    cap: usize,
    len: *mut usize,
) -> AmtlStatus {
    guard(|| {
        if len.is_null() {
            return Err(fail(AmtlStatus::NullPointer, "null length pointer"));
        }
        let m = model_ref(model)?;
        let text = read_str(text)?;
        let seq = lift(m.state.vocab().encode(text))?;
        let sv = lift(CorrectionModel::score(&m.state, &seq))?;
        *len = sv.len();
        if cap < sv.len() {
            return Err(fail(
                AmtlStatus::BufferTooSmall,
                format!("need {} slots, got {cap}", sv.len()),
            ));
        }
        if scores.is_null() && !sv.is_empty() {
            return Err(fail(AmtlStatus::NullPointer, "null score buffer"));
        }
        if !sv.is_empty() {
            std::slice::from_raw_parts_mut(scores, sv.len()).copy_from_slice(&sv.scores);
        }
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn amtl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn amtl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn amtl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[cfg(test)]
mod tests {
    use super::*;
    use amtl::model::ModelConfig;
    use amtl::vocab::Vocab;

    fn tiny_checkpoint(dir: &Path) -> CString {
        let vocab = Vocab::toy();
        let mut cfg = ModelConfig::new(vocab.size());
        cfg.layers = 1;
        cfg.hidden = 16;
        cfg.heads = 2;
        cfg.ffn = 32;
        let m = ModelState::new(cfg, vocab, 3).unwrap();
        let p = dir.join("m.ckpt");
        m.save(&p).unwrap();
        CString::new(p.to_str().unwrap()).unwrap()
    }

    fn last_error() -> String {
        let p = amtl_last_error_message();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    fn load(path: &CStr) -> *mut AmtlModel {
        let mut m = ptr::null_mut();
        assert_eq!(
            unsafe { amtl_model_load(path.as_ptr(), &mut m) },
            AmtlStatus::Ok
        );
        m
    }

    #[test]
    fn correct_matches_library() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_checkpoint(dir.path());
        let m = load(&path);
        let state = ModelState::load(Path::new(path.to_str().unwrap())).unwrap();
        let text = CString::new("abcdefgh").unwrap();
        for fast in [0, 1] {
            let mut out = ptr::null_mut();
            let st = unsafe { amtl_correct(m, text.as_ptr(), fast, &mut out) };
            assert_eq!(st, AmtlStatus::Ok);
            let got = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
            unsafe { amtl_string_free(out) };
            let seq = state.vocab().encode("abcdefgh").unwrap();
            let cfg = CorrectorConfig::default();
            let want = if fast == 1 {
                correct_fast(&seq, &state, &cfg).unwrap()
            } else {
                correct(&seq, &state, &cfg).unwrap()
            };
            assert_eq!(got, state.vocab().decode(&want).unwrap());
        }
        unsafe { amtl_model_free(m) };
    }

    #[test]
    fn score_reports_length_and_short_buffer() {
        let dir = tempfile::tempdir().unwrap();
        let m = load(&tiny_checkpoint(dir.path()));
        let text = CString::new("abcde").unwrap();
        let mut len = 0;
        let st = unsafe { amtl_score(m, text.as_ptr(), ptr::null_mut(), 0, &mut len) };
        assert_eq!(st, AmtlStatus::BufferTooSmall);
        assert_eq!(len, 5);
        let mut buf = vec![f64::NAN; 5];
        let st = unsafe { amtl_score(m, text.as_ptr(), buf.as_mut_ptr(), 5, &mut len) };
        assert_eq!(st, AmtlStatus::Ok);
        assert!(buf.iter().all(|p| (0.0..=1.0).contains(p)));
        unsafe { amtl_model_free(m) };
    }

    #[test]
    fn errors_set_status_and_message() {
        let mut m = ptr::null_mut();
        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(
            unsafe { amtl_model_load(missing.as_ptr(), &mut m) },
            AmtlStatus::Io
        );
        assert!(m.is_null());
        assert!(last_error().contains("nonexistent"));

        assert_eq!(
            unsafe { amtl_model_load(ptr::null(), &mut m) },
            AmtlStatus::NullPointer
        );

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(
            unsafe { amtl_model_load(junk.as_ptr(), &mut m) },
            AmtlStatus::BadCheckpoint
        );

        let m = load(&tiny_checkpoint(dir.path()));
        let bad = CString::new("ab?cd").unwrap();
        let mut out = ptr::null_mut();
        let st = unsafe { amtl_correct(m, bad.as_ptr(), 0, &mut out) };
        assert_eq!(st, AmtlStatus::InvalidInput);
        assert!(out.is_null());

        let invalid = [0xffu8, 0xfe, 0];
        let st = unsafe { amtl_correct(m, invalid.as_ptr().cast(), 0, &mut out) };
        assert_eq!(st, AmtlStatus::InvalidUtf8);
        assert_eq!(
            unsafe { amtl_correct(ptr::null(), bad.as_ptr(), 0, &mut out) },
            AmtlStatus::NullPointer
        );
        unsafe { amtl_model_free(m) };
        unsafe { amtl_model_free(ptr::null_mut()) };
        unsafe { amtl_string_free(ptr::null_mut()) };
    }

    #[test]
    fn policy_swap_requires_matching_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_checkpoint(dir.path());
        let m = load(&path);
        assert_eq!(
            unsafe { amtl_model_load_policy(m, path.as_ptr()) },
            AmtlStatus::Ok
        );

        let vocab = Vocab::toy();
        let mut cfg = ModelConfig::new(vocab.size());
        cfg.layers = 1;
        cfg.hidden = 8;
        cfg.heads = 2;
        cfg.ffn = 16;
        let other = dir.path().join("other.ckpt");
        ModelState::new(cfg, vocab, 1)
            .unwrap()
            .save(&other)
            .unwrap();
        let other = CString::new(other.to_str().unwrap()).unwrap();
        assert_ne!(
            unsafe { amtl_model_load_policy(m, other.as_ptr()) },
            AmtlStatus::Ok
        );
        unsafe { amtl_model_free(m) };
    }

    #[test]
    fn version_is_crate_version() {
        let v = unsafe { CStr::from_ptr(amtl_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn header_declares_every_export() {
        let h = include_str!("../include/amtl.h");
        for f in [
            "amtl_model_load",
            "amtl_model_load_policy",
            "amtl_model_set_search",
            "amtl_model_free",
            "amtl_correct",
            "amtl_score",
            "amtl_string_free",
            "amtl_last_error_message",
            "amtl_version",
            "typedef struct AmtlModel AmtlModel",
        ] {
            assert!(h.contains(f), "{f}");
        }
    }
}
