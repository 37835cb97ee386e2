// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the xconsist engine.
//!
//! Every function returns an [`XcStatus`]. On failure the message is kept
//! per thread and can be read with [`xc_last_error`] until the next call
//! on that thread. Models are opaque handles released with
//! [`xc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use xconsist::metrics::{rankc, top1_accuracy, CandidateList};
use xconsist::pipeline::{exit_code, run_experiment, ExperimentConfig};
use xconsist::repsim::cka_linear;
use xconsist::stats::spearman;
use xconsist::toymodel::{checkpoint, ClozeInput, Decoder, Mat, Model, ReadMode, Readout};
use xconsist::XcError;

/// Result of every `xc_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XcStatus {
    Ok = 0,
    /// A required pointer was NULL.
    Null = 1,
    Argument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Numeric = 6,
    Model = 7,
    /// The score is undefined for the input (constant or empty data).
    Undefined = 8,
    /// The engine panicked; the handle that was passed in should be freed.
    Panic = 9,
}

impl From<&XcError> for XcStatus {
    fn from(e: &XcError) -> Self {
        match e {
            XcError::Argument(_) | XcError::Tokenize(_) | XcError::Patch(_) => Self::Argument,
            XcError::Io { .. } => Self::Io,
            XcError::Parse { .. } | XcError::Json(_) | XcError::Csv(_) => Self::Parse,
            XcError::Config(_) | XcError::UnknownLanguage(_) | XcError::Version(_) | XcError::Trace(_) => {
                Self::Config
            }
            XcError::Numeric { .. } | XcError::Training { .. } => Self::Numeric,
            XcError::Undefined(_) => Self::Undefined,
            _ => Self::Model,
        }
    }
}

/// Opaque model handle.
pub struct XcModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(XcStatus, String);

impl From<XcError> for Failure {
    fn from(e: XcError) -> Self {
        Failure(XcStatus::from(&e), e.to_string())
    }
}

type FfiResult = Result<(), Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> XcStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => XcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
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
            XcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(XcStatus::Null, format!("`{what}` is NULL"))
}

fn arg(msg: impl Into<String>) -> Failure {
    Failure(XcStatus::Argument, msg.into())
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg(format!("`{what}` is not UTF-8")))
}

/// A slice of `len` items; `p` may be NULL only when `len` is 0.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model<'a>(p: *const XcModel) -> Result<&'a Model, Failure> {
    p.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next `xc_*` call on the same thread.
#[no_mangle]
pub extern "C" fn xc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Engine version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a model checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn xc_model_load(path: *const c_char, out: *mut *mut XcModel) -> XcStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = ptr::null_mut();
        let model = checkpoint::load(Path::new(text(path, "path")?))?;
        *slot = Box::into_raw(Box::new(XcModel { model }));
        Ok(())
    })
}

/// Release a handle from [`xc_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must come from [`xc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xc_model_free(model: *mut XcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xc_model_n_layers(model: *const XcModel, out: *mut usize) -> XcStatus {
    guard(|| {
        *self::out(out, "out")? = self::model(model)?.n_layers();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xc_model_vocab_size(model: *const XcModel, out: *mut usize) -> XcStatus {
    guard(|| {
        *self::out(out, "out")? = self::model(model)?.vocab_size();
        Ok(())
    })
}

/// Top-`k` object candidates for a cloze `prompt`, beam width `k`.
///
/// `layer < 0` reads the final head; otherwise the logit lens of that
/// layer. Encoder prompts carry one `<mask>` per object token and ignore
/// `n_object`. Candidate `i` occupies `tokens[i * n .. (i + 1) * n]` with
/// `n = *out_n_object`, and its log-probability is `logprobs[i]`. Fewer
/// than `k` candidates are returned when the vocabulary has fewer
/// sequences of that length.
///
/// # Safety
/// `tokens` must hold `tokens_capacity` items, `logprobs` `k` items.
#[no_mangle]
pub unsafe extern "C" fn xc_model_candidates(
    model: *const XcModel,
    prompt: *const c_char,
    n_object: usize,
    layer: i32,
    k: usize,
    tokens: *mut u32,
    tokens_capacity: usize,
    logprobs: *mut f64,
    out_n_object: *mut usize,
    out_count: *mut usize,
) -> XcStatus {
    guard(|| {
        let model = self::model(model)?;
        let n_out = self::out(out_n_object, "out_n_object")?;
        let count_out = self::out(out_count, "out_count")?;
        if k == 0 {
            return Err(arg("k must be at least 1"));
        }
        let cloze = ClozeInput::from_text(model.arch(), text(prompt, "prompt")?, model.vocab(), n_object)?;
        let readout = match usize::try_from(layer) {
            Err(_) => Readout::Final,
            Ok(l) if l < model.n_layers() => Readout::Layer(l),
            Ok(l) => return Err(arg(format!("layer {l} out of range for {} layers", model.n_layers()))),
        };
        let hyps = Decoder::new(model, &cloze, ReadMode::Single(readout)).candidates(readout, k, k)?;
        let n = cloze.n_object;
        if tokens_capacity < hyps.len() * n {
            return Err(arg(format!("token buffer holds {tokens_capacity}, need {}", hyps.len() * n)));
        }
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if logprobs.is_null() {
            return Err(null("logprobs"));
        }
        let tok = std::slice::from_raw_parts_mut(tokens, hyps.len() * n);
        let lp = std::slice::from_raw_parts_mut(logprobs, hyps.len());
        for (i, h) in hyps.iter().enumerate() {
            tok[i * n..(i + 1) * n].copy_from_slice(&h.tokens);
            lp[i] = h.logprob;
        }
        *n_out = n;
        *count_out = hyps.len();
        Ok(())
    })
}

/// `n_probes` pairs of ranked lists, each `k` sequences of `seq_len`
/// tokens, laid out probe-major.
unsafe fn list_pairs(
    cm: *const u32,
    mono: *const u32,
    n_probes: usize,
    k: usize,
    seq_len: usize,
) -> Result<Vec<(CandidateList, CandidateList)>, Failure> {
    if k == 0 || seq_len == 0 {
        return Err(arg("k and seq_len must be at least 1"));
    }
    let stride = k * seq_len;
    let total = n_probes
        .checked_mul(stride)
        .ok_or_else(|| arg("list buffer size overflows"))?;
    let cm = slice(cm, total, "cm")?;
    let mono = slice(mono, total, "mono")?;
    let lists = |buf: &[u32], p: usize| {
        CandidateList::from_ranked(buf[p * stride..(p + 1) * stride].chunks(seq_len).map(<[u32]>::to_vec).collect())
    };
    (0..n_probes)
        .map(|p| Ok((lists(cm, p)?, lists(mono, p)?)))
        .collect()
}

/// Mean RankC over `n_probes` code-mixed/monolingual list pairs.
///
/// # Safety
/// `cm` and `mono` must each hold `n_probes * k * seq_len` tokens.
#[no_mangle]
pub unsafe extern "C" fn xc_rankc(
    cm: *const u32,
    mono: *const u32,
    n_probes: usize,
    k: usize,
    seq_len: usize,
    out: *mut f64,
) -> XcStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let pairs = list_pairs(cm, mono, n_probes, k, seq_len)?;
        *slot = rankc(pairs.iter().map(|(a, b)| (a, b)))?;
        Ok(())
    })
}

/// Fraction of pairs with the same rank-1 sequence. Same layout as
/// [`xc_rankc`].
///
/// # Safety
/// `cm` and `mono` must each hold `n_probes * k * seq_len` tokens.
#[no_mangle]
pub unsafe extern "C" fn xc_top1(
    cm: *const u32,
    mono: *const u32,
    n_probes: usize,
    k: usize,
    seq_len: usize,
    out: *mut f64,
) -> XcStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let pairs = list_pairs(cm, mono, n_probes, k, seq_len)?;
        *slot = top1_accuracy(pairs.iter().map(|(a, b)| (a, b)))?;
        Ok(())
    })
}

/// Linear CKA between row-major `rows × x_cols` and `rows × y_cols`
/// batches.
///
/// # Safety
/// `x` and `y` must hold `rows * x_cols` and `rows * y_cols` values.
#[no_mangle]
pub unsafe extern "C" fn xc_cka_linear(
    x: *const f64,
    y: *const f64,
    rows: usize,
    x_cols: usize,
    y_cols: usize,
    out: *mut f64,
) -> XcStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        if rows == 0 || x_cols == 0 || y_cols == 0 {
            return Err(arg("empty batch"));
        }
        let size = |c: usize| rows.checked_mul(c).ok_or_else(|| arg("batch size overflows"));
        let x = Mat::from_vec(rows, x_cols, slice(x, size(x_cols)?, "x")?.to_vec());
        let y = Mat::from_vec(rows, y_cols, slice(y, size(y_cols)?, "y")?.to_vec());
        *slot = cka_linear(&x, &y)?;
        Ok(())
    })
}

/// Spearman correlation of `n` paired values and its two-sided p-value.
///
/// # Safety
/// `x` and `y` must hold `n` values; `rho` and `p_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xc_spearman(
    x: *const f64,
    y: *const f64,
    n: usize,
    rho: *mut f64,
    p_value: *mut f64,
) -> XcStatus {
    guard(|| {
        let rho = self::out(rho, "rho")?;
        let p = self::out(p_value, "p_value")?;
        let c = spearman(slice(x, n, "x")?, slice(y, n, "y")?)?;
        *rho = c.rho;
        *p = c.p_value;
        Ok(())
    })
}

/// Run the experiment described by a JSON config file. `*out_exit_code`
/// receives the command-line exit code: 0 when every analysis succeeded,
/// 2 for configuration problems, 3 otherwise. A run whose analyses fail
/// individually still returns `XC_STATUS_OK` with exit code 3.
///
/// # Safety
/// `config_path` must be NUL-terminated and `out_exit_code` writable.
#[no_mangle]
pub unsafe extern "C" fn xc_run_experiment(config_path: *const c_char, out_exit_code: *mut i32) -> XcStatus {
    guard(|| {
        let code = self::out(out_exit_code, "out_exit_code")?;
        let result = ExperimentConfig::load(Path::new(text(config_path, "config_path")?)).and_then(|c| run_experiment(&c));
        *code = exit_code(&result);
        let outcome = result?;
        let failed = outcome.failed();
        if !failed.is_empty() {
            set_error(format!("failed analyses: {}", failed.join(", ")));
        }
        Ok(())
    })
}
