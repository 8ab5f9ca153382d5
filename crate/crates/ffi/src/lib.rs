//! C ABI for mtseq.
//!
//! Every fallible function returns an [`MtseqStatus`]. On failure a message
//! is kept per thread and read with [`mtseq_last_error_message`]. Strings
//! returned through `out` pointers are owned by the caller and released with
//! [`mtseq_string_free`]; handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mtseq::data::BpeModel;
use mtseq::decoding::DecodeConfig;
use mtseq::eval::{bleu_files, tag_error_files, DEFAULT_TAG_DELIMITER};
use mtseq::model::MultiTaskModel;
use mtseq::pipeline::{decode_lines, select_task};
use mtseq::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtseqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Corrupt = 4,
    InvalidArgument = 5,
    UnknownTask = 6,
    Mismatch = 7,
    Runtime = 8,
    Panic = 9,
}

/// A loaded model.
pub struct MtseqModel {
    inner: MultiTaskModel,
}

/// Loaded BPE merges.
pub struct MtseqBpe {
    inner: BpeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(MtseqStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => MtseqStatus::Io,
            Error::Corrupt(_) | Error::Version { .. } | Error::Parse { .. } => MtseqStatus::Corrupt,
            Error::UnknownTask(_) => MtseqStatus::UnknownTask,
            Error::LineCountMismatch { .. } | Error::SentenceLengthMismatch { .. } => MtseqStatus::Mismatch,
            Error::Invalid(_) | Error::Empty(_) | Error::Config(_) => MtseqStatus::InvalidArgument,
            _ => MtseqStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MtseqStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtseqStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MtseqStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MtseqStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MtseqStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller passes a valid, writable pointer or null.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(MtseqStatus::NullPointer, format!("{name} is null")))
}

fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: non-null handles come from the matching `_load` function.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(MtseqStatus::NullPointer, format!("{name} is null")))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(MtseqStatus::Runtime, "output contains a nul byte".into()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mtseq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failure on this thread, or null. Valid until the
/// next mtseq call on the same thread.
#[no_mangle]
pub extern "C" fn mtseq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mtseq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model container.
///
/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtseq_model_load(path: *const c_char, out: *mut *mut MtseqModel) -> MtseqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = MultiTaskModel::load(&path)?;
        *out = Box::into_raw(Box::new(MtseqModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` comes from [`mtseq_model_load`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtseq_model_free(model: *mut MtseqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tasks in the model.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtseq_model_task_count(model: *const MtseqModel, out: *mut usize) -> MtseqStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_arg(out, "out")? = m.inner.tasks().len();
        Ok(())
    })
}

/// Name of task `index`; free with [`mtseq_string_free`].
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtseq_model_task_name(
    model: *const MtseqModel,
    index: usize,
    out: *mut *mut c_char,
) -> MtseqStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let t = m.inner.tasks().get(index).ok_or_else(|| {
            Failure(
                MtseqStatus::InvalidArgument,
                format!("task index {index} out of range for {} tasks", m.inner.tasks().len()),
            )
        })?;
        *out = owned_string(t.name.clone())?;
        Ok(())
    })
}

/// Loads BPE merges written by `mtseq bpe-learn` or training.
///
/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtseq_bpe_load(path: *const c_char, out: *mut *mut MtseqBpe) -> MtseqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = BpeModel::load(&path)?;
        *out = Box::into_raw(Box::new(MtseqBpe { inner }));
        Ok(())
    })
}

/// Releases BPE merges. Null is ignored.
///
/// # Safety
/// `bpe` comes from [`mtseq_bpe_load`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtseq_bpe_free(bpe: *mut MtseqBpe) {
    if !bpe.is_null() {
        drop(Box::from_raw(bpe));
    }
}

unsafe fn decode_one(
    model: *const MtseqModel,
    bpe: *const MtseqBpe,
    task: *const c_char,
    sentence: *const c_char,
    cfg: DecodeConfig,
    tagging: bool,
    out: *mut *mut c_char,
) -> MtseqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = &handle(model, "model")?.inner;
        // SAFETY: a non-null `bpe` is a live handle.
        let bpe = unsafe { bpe.as_ref() }.map(|b| &b.inner);
        let task = select_task(m, opt_str_arg(task, "task")?, tagging)?;
        let sentence = str_arg(sentence, "sentence")?;
        if sentence.contains('\n') {
            return Err(Failure(
                MtseqStatus::InvalidArgument,
                "sentence contains a newline".into(),
            ));
        }
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Failure(MtseqStatus::InvalidArgument, problems.join("; ")));
        }
        let lines = [sentence.to_string()];
        let mut result = decode_lines(m, &task, &lines, bpe, &cfg)?;
        *out = owned_string(result.remove(0))?;
        Ok(())
    })
}

/// Translates one whitespace-tokenized sentence with beam search. `bpe` and
/// `task` may be null; a null task picks the model's only translation task.
/// `beam` 0 uses the default width.
///
/// # Safety
/// Pointers are live handles, nul-terminated strings or null where allowed;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtseq_translate(
    model: *const MtseqModel,
    bpe: *const MtseqBpe,
    task: *const c_char,
    sentence: *const c_char,
    beam: u32,
    out: *mut *mut c_char,
) -> MtseqStatus {
    let mut cfg = DecodeConfig::default();
    if beam > 0 {
        cfg.beam = beam as usize;
    }
    decode_one(model, bpe, task, sentence, cfg, false, out)
}

/// Labels every word of one sentence; the output has one label per word.
/// `bpe` and `task` may be null as in [`mtseq_translate`].
///
/// # Safety
/// As [`mtseq_translate`].
#[no_mangle]
pub unsafe extern "C" fn mtseq_tag(
    model: *const MtseqModel,
    bpe: *const MtseqBpe,
    task: *const c_char,
    sentence: *const c_char,
    out: *mut *mut c_char,
) -> MtseqStatus {
    decode_one(model, bpe, task, sentence, DecodeConfig::default(), true, out)
}

/// Corpus BLEU of two line-aligned files, in `[0, 100]`.
///
/// # Safety
/// Paths are nul-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtseq_eval_bleu_files(
    hyp: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> MtseqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let h = PathBuf::from(str_arg(hyp, "hyp")?);
        let r = PathBuf::from(str_arg(reference, "reference")?);
        *out = bleu_files(&h, &r)?.score;
        Ok(())
    })
}

/// Label error rate of two line-aligned files, in `[0, 100]`. With `coarse`
/// nonzero, labels are cut at `delimiter` (null means ".") first.
///
/// # Safety
/// Paths are nul-terminated strings; `delimiter` may be null; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mtseq_eval_tag_error_files(
    hyp: *const c_char,
    reference: *const c_char,
    coarse: i32,
    delimiter: *const c_char,
    out: *mut f64,
) -> MtseqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let h = PathBuf::from(str_arg(hyp, "hyp")?);
        let r = PathBuf::from(str_arg(reference, "reference")?);
        let d = opt_str_arg(delimiter, "delimiter")?.unwrap_or(DEFAULT_TAG_DELIMITER);
        *out = tag_error_files(&h, &r, (coarse != 0).then_some(d))?.rate;
        Ok(())
    })
}
