//! C ABI over trained `xcross` models.
//!
//! Every function returns an [`XcStatus`]; outputs go through pointer
//! arguments. Handles are opaque and must be released with the matching
//! `_free` function. After a non-OK status, [`xc_last_error`] copies a
//! description of the failure for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use xcross::evalharness::{evaluate, rank_of, EvalReport, Scorer};
use xcross::lora::{lora_param_count, LoraSet};
use xcross::recdata::{read_generated, Split, DEFAULT_TRUNCATE};
use xcross::training::{Checkpoint, SingleDomainModel, XCrossView};
use xcross::xcross::integrator_params_per_layer;
use xcross::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    HashMismatch = 5,
    NonFinite = 6,
    Panic = 7,
}

/// Kind of model held by an [`XcModel`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XcModelKind {
    /// Base encoder with one domain's adapters and head.
    SingleDomain = 0,
    /// X-Cross over several source adapters.
    Integrated = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct XcReport {
    /// Percentages.
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
    /// In `[0, 1]`.
    pub mrr10: f64,
    pub count: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct XcParamReport {
    pub integrator_per_layer: usize,
    /// One adapted `d×d` matrix of one domain.
    pub lora_per_matrix: usize,
    pub ratio: f64,
}

/// A loaded checkpoint that can score prompts.
pub struct XcModel {
    checkpoint: Checkpoint,
}

impl XcModel {
    fn kind(&self) -> XcModelKind {
        if self.checkpoint.xcross.is_some() {
            XcModelKind::Integrated
        } else {
            XcModelKind::SingleDomain
        }
    }

    fn with_scorer<T>(&self, f: impl FnOnce(&dyn Scorer) -> xcross::Result<T>) -> xcross::Result<T> {
        let c = &self.checkpoint;
        match &c.xcross {
            Some(model) => {
                let sources: Vec<&LoraSet> = c.adapters.iter().map(|a| &a.lora).collect();
                f(&XCrossView::new(&c.base, sources, model)?)
            }
            None => {
                let a = &c.adapters[0];
                f(&SingleDomainModel {
                    base: &c.base,
                    lora: Some(&a.lora),
                    head: &a.head,
                })
            }
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> XcStatus {
    match e {
        Error::Shape { .. } | Error::Usage(_) | Error::Config(_) | Error::Input(_) => XcStatus::InvalidArgument,
        Error::Io(_) | Error::Missing(_) => XcStatus::Io,
        Error::Schema(_) | Error::Parse { .. } | Error::Json(_) => XcStatus::Parse,
        Error::Hash(_) => XcStatus::HashMismatch,
        Error::NonFinite(_) => XcStatus::NonFinite,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), XcStatus>) -> XcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => XcStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            XcStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, XcStatus>;
}

impl<T> OrStatus<T> for xcross::Result<T> {
    fn or_status(self) -> Result<T, XcStatus> {
        self.map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })
    }
}

fn invalid(msg: &str) -> XcStatus {
    set_error(msg.to_string());
    XcStatus::InvalidArgument
}

fn null(what: &str) -> XcStatus {
    set_error(format!("{what} is null"));
    XcStatus::NullPointer
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, XcStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], XcStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`) and returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn xc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint written by `xcross train-source` or `xcross
/// train-xcross`. Component hashes are verified.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xc_model_load(path: *const c_char, out: *mut *mut XcModel) -> XcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let checkpoint = Checkpoint::load(path).or_status()?;
        if checkpoint.xcross.is_none() && checkpoint.adapters.is_empty() {
            return Err(invalid("checkpoint holds only pretrained weights and cannot score prompts"));
        }
        *out = Box::into_raw(Box::new(XcModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
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
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xc_model_kind(model: *const XcModel, out: *mut XcModelKind) -> XcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.kind();
        Ok(())
    })
}

/// Maximum prompt length accepted by the model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xc_model_max_len(model: *const XcModel, out: *mut usize) -> XcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.checkpoint.encoder_config.max_len;
        Ok(())
    })
}

/// Scores `count` prompts stored back to back in `tokens`, prompt `i`
/// having `lengths[i]` tokens. Writes `count` scores to `scores`.
///
/// # Safety
/// `tokens` must hold `Σ lengths` values, `lengths` `count` values and
/// `scores` room for `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn xc_model_score(
    model: *const XcModel,
    tokens: *const u32,
    lengths: *const usize,
    count: usize,
    scores: *mut f64,
) -> XcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let lengths = slice_arg(lengths, count, "lengths")?;
        let total = lengths
            .iter()
            .try_fold(0usize, |a, &l| a.checked_add(l))
            .ok_or_else(|| invalid("prompt lengths overflow"))?;
        let tokens = slice_arg(tokens, total, "tokens")?;
        if count > 0 && scores.is_null() {
            return Err(null("scores"));
        }
        let out = m
            .with_scorer(|s| {
                let mut at = 0;
                lengths
                    .iter()
                    .map(|&l| {
                        let r = s.score(&tokens[at..at + l]);
                        at += l;
                        r
                    })
                    .collect::<xcross::Result<Vec<f64>>>()
            })
            .or_status()?;
        if count > 0 {
            ptr::copy_nonoverlapping(out.as_ptr(), scores, count);
        }
        Ok(())
    })
}

fn parse_split(s: u32) -> Result<Split, XcStatus> {
    match s {
        0 => Ok(Split::Train),
        1 => Ok(Split::Valid),
        2 => Ok(Split::Test),
        _ => Err(invalid("split must be 0 (train), 1 (valid) or 2 (test)")),
    }
}

/// Evaluates the model on one domain split (`0` train, `1` valid, `2`
/// test) of a data directory written by `xcross gen-data`.
///
/// # Safety
/// `model` must be a live handle, `data_dir` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xc_model_evaluate(
    model: *const XcModel,
    data_dir: *const c_char,
    domain: u16,
    split: u32,
    out: *mut XcReport,
) -> XcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let dir = path_arg(data_dir, "data_dir")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let split = parse_split(split)?;
        let (data, _) = read_generated(dir).or_status()?;
        let instances = data
            .instances
            .get(domain as usize)
            .ok_or_else(|| invalid(&format!("domain {domain} is not in the dataset")))?;
        let subset: Vec<_> = instances.iter().filter(|i| i.split == split).cloned().collect();
        let max_len = m.checkpoint.encoder_config.max_len;
        let (encoded, _) =
            xcross::recdata::encode_instances(&subset, &data.catalog, DEFAULT_TRUNCATE, max_len).or_status()?;
        let report: EvalReport = m.with_scorer(|s| evaluate(s, &encoded, "ffi", 0)).or_status()?.0;
        *out = XcReport {
            hit1: report.hit1,
            hit3: report.hit3,
            hit10: report.hit10,
            mrr10: report.mrr10,
            count: report.count,
        };
        Ok(())
    })
}

/// 1-based rank of `scores[positive]` among `count` scores; ties count
/// against the positive.
///
/// # Safety
/// `scores` must hold `count` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xc_rank_of(scores: *const f64, count: usize, positive: usize, out: *mut usize) -> XcStatus {
    guard(|| {
        let scores = slice_arg(scores, count, "scores")?;
        if positive >= count {
            return Err(invalid("positive index out of range"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            set_error("scores must be finite".into());
            return Err(XcStatus::NonFinite);
        }
        *out.as_mut().ok_or_else(|| null("out"))? = rank_of(scores, positive);
        Ok(())
    })
}

/// Integrator parameters per layer for `n` domains of width `d`, against
/// one rank-`rank` LoRA matrix.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xc_param_report(n: usize, d: usize, rank: usize, out: *mut XcParamReport) -> XcStatus {
    guard(|| {
        if n < 2 || d == 0 || rank == 0 {
            return Err(invalid("need n >= 2, d > 0 and rank > 0"));
        }
        let integrator = integrator_params_per_layer(n, d);
        let lora = lora_param_count(d, rank, 1, 1);
        *out.as_mut().ok_or_else(|| null("out"))? = XcParamReport {
            integrator_per_layer: integrator,
            lora_per_matrix: lora,
            ratio: integrator as f64 / lora as f64,
        };
        Ok(())
    })
}
