//! C ABI for the rectflow library: opaque handles, integer status codes,
//! and a thread-local last-error message.
//!
//! Every function that can fail returns an `RfStatus`; on failure
//! `rf_last_error` yields a UTF-8 message valid until the next failing call
//! on the same thread.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;

use rectflow::data::{read_corpus, read_templates, Corpus, TemplateSet};
use rectflow::metrics::energy_distance;
use rectflow::model::{encode_text, load_checkpoint, regulate_length, vf_forward, Model};
use rectflow::numeric::{RngState, Tensor};
use rectflow::ode::{solve, Method, SolverConfig};
use rectflow::Error;

/// Status codes mirroring the CLI exit-code convention.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfStatus {
    /// Success.
    RfOk = 0,
    /// Null pointer or invalid UTF-8 argument.
    RfBadArgument = 1,
    /// Validation, file-format or I/O failure.
    RfInvalidInput = 2,
    /// Numerical failure (shape mismatch, divergence, non-finite values).
    RfNumeric = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RfStatus {
    match e {
        Error::Validation(_) | Error::Format(_) | Error::Io(_) => RfStatus::RfInvalidInput,
        Error::Shape(_) | Error::Divergence { .. } | Error::Numeric(_) => RfStatus::RfNumeric,
    }
}

fn fail(e: Error) -> RfStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn bad(msg: &str) -> RfStatus {
    set_error(msg);
    RfStatus::RfBadArgument
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or null.
unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, RfStatus> {
    if ptr.is_null() {
        return Err(bad("null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| bad("argument is not valid UTF-8"))
}

/// Opaque trained-model handle.
pub struct RfModel(Model);
/// Opaque corpus handle.
pub struct RfCorpus(Corpus);
/// Opaque phone-template handle.
pub struct RfTemplates(TemplateSet);
/// Opaque frame buffer: row-major `rows x cols` doubles.
pub struct RfBuffer {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Message of the most recent failure on this thread; valid until the next
/// failing call. Never null.
#[no_mangle]
pub extern "C" fn rf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static version string of the underlying library.
#[no_mangle]
pub extern "C" fn rf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a checkpoint into a new model handle.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_model_load(path: *const c_char, out: *mut *mut RfModel) -> RfStatus {
    if out.is_null() {
        return bad("null output pointer");
    }
    let path = match cstr(path) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match load_checkpoint(Path::new(path)) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(RfModel(m)));
            RfStatus::RfOk
        }
        Err(e) => fail(e),
    }
}

/// Rectification round recorded in the checkpoint (0 = base model).
///
/// # Safety
/// `model` must come from `rf_model_load` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn rf_model_round(model: *const RfModel) -> u32 {
    if model.is_null() {
        return u32::MAX;
    }
    (*model).0.round
}

/// # Safety
/// `model` must come from `rf_model_load`; passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rf_model_free(model: *mut RfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Read a corpus file into a new handle.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_corpus_read(path: *const c_char, out: *mut *mut RfCorpus) -> RfStatus {
    if out.is_null() {
        return bad("null output pointer");
    }
    let path = match cstr(path) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match read_corpus(Path::new(path)) {
        Ok(c) => {
            *out = Box::into_raw(Box::new(RfCorpus(c)));
            RfStatus::RfOk
        }
        Err(e) => fail(e),
    }
}

/// Number of utterances, or SIZE_MAX for a null handle.
///
/// # Safety
/// `corpus` must come from `rf_corpus_read` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn rf_corpus_len(corpus: *const RfCorpus) -> usize {
    if corpus.is_null() {
        return usize::MAX;
    }
    (*corpus).0.utterances.len()
}

/// # Safety
/// `corpus` must come from `rf_corpus_read`; passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rf_corpus_free(corpus: *mut RfCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Read a template file into a new handle.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_templates_read(
    path: *const c_char,
    out: *mut *mut RfTemplates,
) -> RfStatus {
    if out.is_null() {
        return bad("null output pointer");
    }
    let path = match cstr(path) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match read_templates(Path::new(path)) {
        Ok(t) => {
            *out = Box::into_raw(Box::new(RfTemplates(t)));
            RfStatus::RfOk
        }
        Err(e) => fail(e),
    }
}

/// Phone-vocabulary size, or SIZE_MAX for a null handle.
///
/// # Safety
/// `templates` must come from `rf_templates_read` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn rf_templates_vocab_size(templates: *const RfTemplates) -> usize {
    if templates.is_null() {
        return usize::MAX;
    }
    (*templates).0.vocab_size
}

/// # Safety
/// `templates` must come from `rf_templates_read`; passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rf_templates_free(templates: *mut RfTemplates) {
    if !templates.is_null() {
        drop(Box::from_raw(templates));
    }
}

/// Generate frames for corpus utterance `utt_index` with ground-truth
/// durations, integrating from seeded Gaussian noise.
///
/// # Safety
/// Handles must be live; `solver` NUL-terminated ("euler", "midpoint",
/// "rk4"); `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_sample(
    model: *const RfModel,
    corpus: *const RfCorpus,
    utt_index: usize,
    solver: *const c_char,
    nfe: usize,
    seed: u64,
    out: *mut *mut RfBuffer,
) -> RfStatus {
    if model.is_null() || corpus.is_null() || out.is_null() {
        return bad("null handle");
    }
    let solver = match cstr(solver) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let model = &(*model).0;
    let corpus = &(*corpus).0;
    let Some(utt) = corpus.utterances.get(utt_index) else {
        return bad("utterance index out of range");
    };
    let inner = || -> rectflow::Result<Tensor> {
        let method = Method::parse(solver)?;
        let latents = encode_text(&model.params, &model.config, &utt.phone_ids, utt.speaker_id)?;
        let cond = regulate_length(&latents, &utt.durations)?;
        let mut rng = RngState::new(seed);
        let x0 = rng.normal_tensor(utt.frames.shape());
        let mut field = |x: &Tensor, t: f64| vf_forward(&model.params, &model.config, x, &cond, t);
        let (x1, _) = solve(&mut field, &x0, &SolverConfig::new(method, nfe))?;
        Ok(x1)
    };
    match inner() {
        Ok(x1) => {
            let shape = x1.shape().to_vec();
            *out = Box::into_raw(Box::new(RfBuffer {
                rows: shape[0],
                cols: shape[1],
                data: x1.data().to_vec(),
            }));
            RfStatus::RfOk
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `buf` must come from `rf_sample` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn rf_buffer_rows(buf: *const RfBuffer) -> usize {
    if buf.is_null() {
        return usize::MAX;
    }
    (*buf).rows
}

/// # Safety
/// `buf` must come from `rf_sample` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn rf_buffer_cols(buf: *const RfBuffer) -> usize {
    if buf.is_null() {
        return usize::MAX;
    }
    (*buf).cols
}

/// Row-major data pointer, valid until the buffer is freed.
///
/// # Safety
/// `buf` must come from `rf_sample` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn rf_buffer_data(buf: *const RfBuffer) -> *const f64 {
    if buf.is_null() {
        return std::ptr::null();
    }
    (*buf).data.as_ptr()
}

/// # Safety
/// `buf` must come from `rf_sample`; passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rf_buffer_free(buf: *mut RfBuffer) {
    if !buf.is_null() {
        drop(Box::from_raw(buf));
    }
}

/// Energy distance between two row-major sample blocks of width `d`.
///
/// # Safety
/// `a` must point to `n*d` doubles, `b` to `m*d`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rf_energy_distance(
    a: *const f64,
    n: usize,
    b: *const f64,
    m: usize,
    d: usize,
    out: *mut f64,
) -> RfStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return bad("null pointer");
    }
    if d == 0 {
        return bad("d must be positive");
    }
    let ta = match Tensor::new(vec![n, d], std::slice::from_raw_parts(a, n * d).to_vec()) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let tb = match Tensor::new(vec![m, d], std::slice::from_raw_parts(b, m * d).to_vec()) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    match energy_distance(&ta, &tb) {
        Ok(v) => {
            *out = v;
            RfStatus::RfOk
        }
        Err(e) => fail(e),
    }
}
