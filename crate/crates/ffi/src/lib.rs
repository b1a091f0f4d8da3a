//! C ABI over the truebrief toolkit.
//!
//! Every function returns a [`TbStatus`]. On failure a message is stored
//! per thread and can be read with [`tb_last_error`]. Models and detectors
//! are opaque handles released with their `_free` function; strings
//! returned by the library are released with [`tb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use truebrief::detection::{f1_from, featurize, Detector};
use truebrief::eval::{balanced_score, faithfulness_score, rouge_l, rouge_n, Judge};
use truebrief::model::{checkpoint, tokenizer, Model, ModelConfig, ModelError};
use truebrief::numcore::NumError;
use truebrief::objectives::{
    preference_loss, DivisorMode, LogProbPair, LossBatch, LossSample, ObjectiveError, PreferenceLoss,
};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Numerical = 5,
    Panic = 6,
}

/// Preference loss selector for [`tb_preference_loss`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbLoss {
    Dpo = 0,
    /// Add-DPO with divisor `k`.
    AddDpoK = 1,
    /// Add-DPO with divisor `k - 1`.
    AddDpoKMinus1 = 2,
    PlDpo = 3,
}

/// Opaque toy decoder.
pub struct TbModel(Model<f32>);

/// Opaque fitted hallucination detector.
pub struct TbDetector(Detector);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(TbStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Self(TbStatus::InvalidArgument, msg.into())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match &e {
            ModelError::Num(NumError::NonFinite { .. }) => TbStatus::Numerical,
            ModelError::Io(_) => TbStatus::Io,
            _ => TbStatus::InvalidArgument,
        };
        Self(status, e.to_string())
    }
}

impl From<ObjectiveError> for Failure {
    fn from(e: ObjectiveError) -> Self {
        let status = match &e {
            ObjectiveError::Num(NumError::NonFinite { .. }) => TbStatus::Numerical,
            _ => TbStatus::InvalidArgument,
        };
        Self(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.to_string());
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TbStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&msg);
            TbStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(TbStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TbStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(TbStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(TbStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(TbStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::invalid("output contains a NUL byte"))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`) and returns the full length including the
/// terminator. Pass a null `buf` to query the length.
///
/// # Safety
///
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tb_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Releases a string returned by this library.
///
/// # Safety
///
/// `s` must be null or a pointer obtained from this library and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn tb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Mean preference loss over `n_samples` samples of `k` responses each.
/// `policy` and `reference` hold `n_samples * k` log-probabilities, row
/// major, chosen response first in each row.
///
/// # Safety
///
/// `policy` and `reference` must point to `n_samples * k` readable values;
/// `out_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_preference_loss(
    kind: TbLoss,
    beta: f64,
    k: usize,
    n_samples: usize,
    policy: *const f64,
    reference: *const f64,
    out_loss: *mut f64,
) -> TbStatus {
    guard(|| {
        let out_loss = out(out_loss, "out_loss")?;
        if k < 2 || n_samples == 0 {
            return Err(Failure::invalid("need k >= 2 and at least one sample"));
        }
        let len = n_samples
            .checked_mul(k)
            .ok_or_else(|| Failure::invalid("size overflow"))?;
        let policy = slice(policy, len, "policy")?;
        let reference = slice(reference, len, "reference")?;
        let samples = policy
            .chunks(k)
            .zip(reference.chunks(k))
            .map(|(p, r)| {
                let mut pairs = p
                    .iter()
                    .zip(r)
                    .map(|(&policy, &reference)| LogProbPair { policy, reference });
                let chosen = pairs.next().expect("k >= 2");
                LossSample {
                    chosen,
                    rejected: pairs.collect(),
                }
            })
            .collect();
        let batch = LossBatch { samples, beta };
        let loss_kind = match kind {
            TbLoss::Dpo => PreferenceLoss::Dpo,
            TbLoss::AddDpoK => PreferenceLoss::AddDpo(DivisorMode::K),
            TbLoss::AddDpoKMinus1 => PreferenceLoss::AddDpo(DivisorMode::KMinus1),
            TbLoss::PlDpo => PreferenceLoss::PlDpo,
        };
        *out_loss = preference_loss(&batch, loss_kind)?;
        Ok(())
    })
}

/// `(completeness / 5 + f_score) / 2`.
///
/// # Safety
///
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_balanced_score(completeness: f64, f_score: f64, out_score: *mut f64) -> TbStatus {
    guard(|| {
        let o = out(out_score, "out_score")?;
        *o = balanced_score(completeness, f_score).map_err(|e| Failure::invalid(e.to_string()))?;
        Ok(())
    })
}

/// F1 from precision and recall; 0 when both are 0.
#[no_mangle]
pub extern "C" fn tb_f1(precision: f64, recall: f64) -> f64 {
    f1_from(precision, recall)
}

/// ROUGE-N F1 (`n >= 1`) or ROUGE-L F1 (`n == 0`) of `candidate` against
/// `reference`.
///
/// # Safety
///
/// Both strings must be NUL terminated; `out_f1` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_rouge_f1(
    reference: *const c_char,
    candidate: *const c_char,
    n: usize,
    out_f1: *mut f64,
) -> TbStatus {
    guard(|| {
        let r = text(reference, "reference")?;
        let c = text(candidate, "candidate")?;
        let o = out(out_f1, "out_f1")?;
        *o = if n == 0 { rouge_l(r, c).f1 } else { rouge_n(r, c, n).f1 };
        Ok(())
    })
}

/// Share of `candidate` sentences supported by `source` under the lexical
/// proxy judge.
///
/// # Safety
///
/// Both strings must be NUL terminated; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_faithfulness_proxy(
    source: *const c_char,
    candidate: *const c_char,
    out_score: *mut f64,
) -> TbStatus {
    guard(|| {
        let s = text(source, "source")?;
        let c = text(candidate, "candidate")?;
        let o = out(out_score, "out_score")?;
        let (f, _) = faithfulness_score(s, c, Judge::Proxy).map_err(|e| Failure::invalid(e.to_string()))?;
        *o = f;
        Ok(())
    })
}

/// A freshly initialised model with the default vocabulary and a feed-forward
/// width of `4 * d_model`.
///
/// # Safety
///
/// `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_new(
    layers: usize,
    heads: usize,
    d_model: usize,
    context: usize,
    seed: u64,
    out_model: *mut *mut TbModel,
) -> TbStatus {
    guard(|| {
        let o = out(out_model, "out_model")?;
        let cfg = ModelConfig {
            layers,
            heads,
            d_model,
            d_ff: 4 * d_model,
            context,
            seed,
            ..ModelConfig::default()
        };
        *o = Box::into_raw(Box::new(TbModel(Model::init(cfg)?)));
        Ok(())
    })
}

/// Loads a `.tblm` checkpoint.
///
/// # Safety
///
/// `path` must be NUL terminated; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_load(path: *const c_char, out_model: *mut *mut TbModel) -> TbStatus {
    guard(|| {
        let p = text(path, "path")?;
        let o = out(out_model, "out_model")?;
        *o = Box::into_raw(Box::new(TbModel(checkpoint::load(Path::new(p))?)));
        Ok(())
    })
}

/// Writes a model to a `.tblm` checkpoint.
///
/// # Safety
///
/// `model` must be a live handle and `path` NUL terminated.
#[no_mangle]
pub unsafe extern "C" fn tb_model_save(model: *const TbModel, path: *const c_char) -> TbStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let p = text(path, "path")?;
        checkpoint::save(&m.0, Path::new(p))?;
        Ok(())
    })
}

/// Releases a model handle.
///
/// # Safety
///
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tb_model_free(model: *mut TbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Greedy continuation of `prompt` of at most `max_new` tokens. The text is
/// returned in `out_text` and must be released with [`tb_string_free`].
///
/// # Safety
///
/// `model` must be a live handle, `prompt` NUL terminated and `out_text`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_generate(
    model: *const TbModel,
    prompt: *const c_char,
    max_new: usize,
    out_text: *mut *mut c_char,
) -> TbStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let p = text(prompt, "prompt")?;
        let o = out(out_text, "out_text")?;
        let (generated, _) = m.0.generate_text(p, max_new)?;
        *o = c_string(generated)?;
        Ok(())
    })
}

/// Log-probability of `response` (followed by end of sequence) given
/// `prompt`.
///
/// # Safety
///
/// `model` must be a live handle, both strings NUL terminated and `out_logprob`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_sequence_logprob(
    model: *const TbModel,
    prompt: *const c_char,
    response: *const c_char,
    out_logprob: *mut f64,
) -> TbStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let p = text(prompt, "prompt")?;
        let r = text(response, "response")?;
        let o = out(out_logprob, "out_logprob")?;
        let mut ids = tokenizer::tokenize(r);
        ids.push(tokenizer::EOS);
        *o = m.0.sequence_logprob(&tokenizer::encode_prompt(p), &ids)?;
        Ok(())
    })
}

/// Parses a detector saved as JSON by the `detect` command.
///
/// # Safety
///
/// `json` must be NUL terminated; `out_detector` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_detector_from_json(json: *const c_char, out_detector: *mut *mut TbDetector) -> TbStatus {
    guard(|| {
        let j = text(json, "json")?;
        let o = out(out_detector, "out_detector")?;
        let det: Detector = serde_json::from_str(j).map_err(|e| Failure::invalid(e.to_string()))?;
        *o = Box::into_raw(Box::new(TbDetector(det)));
        Ok(())
    })
}

/// Releases a detector handle.
///
/// # Safety
///
/// `detector` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tb_detector_free(detector: *mut TbDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Number of features the detector expects; 0 for a null handle.
///
/// # Safety
///
/// `detector` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tb_detector_input_len(detector: *const TbDetector) -> usize {
    detector.as_ref().map_or(0, |d| d.0.scaler.mean.len())
}

/// Classifies one feature vector. `out_label` is 1 for hallucinated.
///
/// # Safety
///
/// `features` must point to `len` readable values; the outputs must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tb_detector_predict(
    detector: *const TbDetector,
    features: *const f64,
    len: usize,
    out_label: *mut c_int,
    out_score: *mut f64,
) -> TbStatus {
    guard(|| {
        let d = handle(detector, "detector")?;
        let x = slice(features, len, "features")?;
        let label = out(out_label, "out_label")?;
        let score = out(out_score, "out_score")?;
        let p = d.0.predict(x).map_err(|e| Failure::invalid(e.to_string()))?;
        *label = c_int::from(p.label);
        *score = p.score;
        Ok(())
    })
}

/// Generates from `prompt` with `model`, featurizes the trace the way the
/// detector was trained and classifies it.
///
/// # Safety
///
/// Handles must be live, `prompt` NUL terminated and outputs writable.
#[no_mangle]
pub unsafe extern "C" fn tb_detect_generation(
    model: *const TbModel,
    detector: *const TbDetector,
    prompt: *const c_char,
    max_new: usize,
    out_label: *mut c_int,
    out_score: *mut f64,
) -> TbStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let d = handle(detector, "detector")?;
        let p = text(prompt, "prompt")?;
        let label = out(out_label, "out_label")?;
        let score = out(out_score, "out_score")?;
        let (_, trace) = m.0.generate_text(p, max_new)?;
        let spec = &d.0.spec;
        let feats = featurize(&trace, spec.pooling, spec.log_space).map_err(|e| Failure::invalid(e.to_string()))?;
        let pred =
            d.0.predict(feats.select(spec.features))
                .map_err(|e| Failure::invalid(e.to_string()))?;
        *label = c_int::from(pred.label);
        *score = pred.score;
        Ok(())
    })
}

/// Runs the command-line front end with `argv[0..argc]` and the process
/// environment; returns its exit code.
///
/// # Safety
///
/// `argv` must point to `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn tb_cli_run(argc: c_int, argv: *const *const c_char) -> c_int {
    let mut args = Vec::new();
    let status = guard(|| {
        let n = usize::try_from(argc).map_err(|_| Failure::invalid("negative argc"))?;
        for (i, &a) in slice(argv, n, "argv")?.iter().enumerate() {
            args.push(text(a, &format!("argv[{i}]"))?.to_string());
        }
        Ok(())
    });
    if status != TbStatus::Ok {
        return 2;
    }
    catch_unwind(|| truebrief::cli::run_with_env(args, std::env::vars())).unwrap_or(1)
}

#[cfg(test)]
mod tests;
