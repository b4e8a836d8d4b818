//! C ABI over the vtagent core: answer metrics, the turn grammar, manifest
//! loading and the GRPO reward math.
//!
//! Every fallible function returns a [`VtStatus`] and writes its result
//! through an out-pointer. On failure a message is available from
//! [`vt_last_error_message`] on the same thread. Strings returned to the caller
//! are owned by the caller and must be released with [`vt_string_free`].
//! Panics never cross the boundary; they surface as `VT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vtagent_core::data::{load_manifest_with, DatasetManifest, LoadOptions};
use vtagent_core::grammar::{self, Action, Turn};
use vtagent_core::{grpo, metrics};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseError = 4,
    NonFinite = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 99,
}

/// Parsed model turn.
pub struct VtTurn(Turn);

/// Loaded dataset manifest.
pub struct VtManifest(DatasetManifest);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(VtStatus, String);

type FfiResult = Result<(), Failure>;

fn fail<T>(status: VtStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> FfiResult) -> VtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VtStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(VtStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(VtStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(VtStatus::NullPointer, format!("{name} is null"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .map_or_else(|| fail(VtStatus::NullPointer, format!("{name} is null")), Ok)
}

unsafe fn golds_arg(golds: *const *const c_char, n: usize) -> Result<Vec<String>, Failure> {
    slice_arg(golds, n, "golds")?
        .iter()
        .map(|&g| str_arg(g, "gold answer").map(str::to_string))
        .collect()
}

fn to_c_string(s: &str) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .or_else(|_| fail(VtStatus::InvalidArgument, "string contains an interior NUL"))
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn vt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn vt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vt_normalize_answer(text: *const c_char, out: *mut *mut c_char) -> VtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = to_c_string(&metrics::normalize_answer(str_arg(text, "text")?))?;
        Ok(())
    })
}

/// Character-level edit distance.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vt_levenshtein(a: *const c_char, b: *const c_char, out: *mut usize) -> VtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = metrics::levenshtein(str_arg(a, "a")?, str_arg(b, "b")?);
        Ok(())
    })
}

/// ANLS of `pred` against `n_golds` gold answers.
///
/// # Safety
/// `pred` and each of the `n_golds` entries of `golds` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vt_anls(
    pred: *const c_char,
    golds: *const *const c_char,
    n_golds: usize,
    threshold: f64,
    out: *mut f64,
) -> VtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if !(0.0..=1.0).contains(&threshold) {
            return fail(VtStatus::InvalidArgument, "threshold must lie in [0, 1]");
        }
        *out = metrics::anls(str_arg(pred, "pred")?, &golds_arg(golds, n_golds)?, threshold);
        Ok(())
    })
}

/// 1 when the normalized prediction equals a normalized gold answer, else 0.
///
/// # Safety
/// As for [`vt_anls`].
#[no_mangle]
pub unsafe extern "C" fn vt_exact_accuracy(
    pred: *const c_char,
    golds: *const *const c_char,
    n_golds: usize,
    out: *mut u8,
) -> VtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = metrics::exact_accuracy(str_arg(pred, "pred")?, &golds_arg(golds, n_golds)?);
        Ok(())
    })
}

/// Correctness reward plus the keyframe-selection bonus.
#[no_mangle]
pub extern "C" fn vt_compute_reward(answer_correct: bool, tool_used: bool) -> f64 {
    grpo::compute_reward(answer_correct, tool_used)
}

/// Group-normalized advantages of `n` rewards, written to `out[0..n]`.
///
/// # Safety
/// `rewards` must hold `n` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn vt_group_advantages(
    rewards: *const f64,
    n: usize,
    delta: f64,
    out: *mut f64,
) -> VtStatus {
    guard(|| {
        let r = slice_arg(rewards, n, "rewards")?;
        if n < 2 || !(delta > 0.0) {
            return fail(VtStatus::InvalidArgument, "need at least 2 rewards and delta > 0");
        }
        if out.is_null() {
            return fail(VtStatus::NullPointer, "out is null");
        }
        let adv = grpo::group_advantages(r, delta);
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&adv);
        Ok(())
    })
}

/// Clipped surrogate objective over a group of `n` trajectories.
///
/// # Safety
/// The three input arrays must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn vt_grpo_objective(
    new_logp: *const f64,
    old_logp: *const f64,
    advantages: *const f64,
    n: usize,
    eps: f64,
    out: *mut f64,
) -> VtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let new = slice_arg(new_logp, n, "new_logp")?;
        let old = slice_arg(old_logp, n, "old_logp")?;
        let adv = slice_arg(advantages, n, "advantages")?;
        if n == 0 || !(eps > 0.0) {
            return fail(VtStatus::InvalidArgument, "need a non-empty group and eps > 0");
        }
        match grpo::grpo_objective(new, old, adv, eps) {
            Ok(v) => {
                *out = v;
                Ok(())
            }
            Err(e) => fail(VtStatus::NonFinite, e.to_string()),
        }
    })
}

/// Validates raw frame ids. Kept ids are written to `out_ids` (at most
/// `out_cap`), their count to `out_len`. An empty result is `VT_STATUS_PARSE_ERROR`.
///
/// # Safety
/// `ids` must hold `n` values and `out_ids` room for `out_cap`.
#[no_mangle]
pub unsafe extern "C" fn vt_validate_keyframes(
    ids: *const i64,
    n: usize,
    frame_count: usize,
    cap: usize,
    out_ids: *mut usize,
    out_cap: usize,
    out_len: *mut usize,
) -> VtStatus {
    guard(|| {
        let out_len = out_arg(out_len, "out_len")?;
        let raw = slice_arg(ids, n, "ids")?;
        let set = grammar::validate_keyframes(raw, frame_count, cap)
            .or_else(|e| fail(VtStatus::ParseError, e.to_string()))?;
        *out_len = set.ids.len();
        if set.ids.len() > out_cap {
            return fail(VtStatus::BufferTooSmall, format!("need room for {} ids", set.ids.len()));
        }
        if !set.ids.is_empty() {
            if out_ids.is_null() {
                return fail(VtStatus::NullPointer, "out_ids is null");
            }
            std::slice::from_raw_parts_mut(out_ids, set.ids.len()).copy_from_slice(&set.ids);
        }
        Ok(())
    })
}

/// Parses one model turn. Free the handle with [`vt_turn_free`].
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vt_turn_parse(text: *const c_char, out: *mut *mut VtTurn) -> VtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let turn = grammar::parse_turn(str_arg(text, "text")?)
            .or_else(|e| fail(VtStatus::ParseError, e.to_string()))?;
        *out = Box::into_raw(Box::new(VtTurn(turn)));
        Ok(())
    })
}

/// # Safety
/// `turn` must come from [`vt_turn_parse`] and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn vt_turn_free(turn: *mut VtTurn) {
    if !turn.is_null() {
        drop(Box::from_raw(turn));
    }
}

/// True when the turn's action is a keyframe selection.
///
/// # Safety
/// `turn` must be a live handle or NULL (NULL yields false).
#[no_mangle]
pub unsafe extern "C" fn vt_turn_is_select(turn: *const VtTurn) -> bool {
    turn.as_ref().is_some_and(|t| t.0.action.is_select())
}

/// Frame ids of a selection action, as written (unvalidated).
///
/// # Safety
/// `turn` must be a live handle; `buf` must have room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn vt_turn_frame_ids(
    turn: *const VtTurn,
    buf: *mut i64,
    cap: usize,
    out_len: *mut usize,
) -> VtStatus {
    guard(|| {
        let t = turn
            .as_ref()
            .map_or_else(|| fail(VtStatus::NullPointer, "turn is null"), Ok)?;
        let out_len = out_arg(out_len, "out_len")?;
        let ids = match &t.0.action {
            Action::SelectKeyframes { frame_ids } => frame_ids,
            Action::Answer { .. } => return fail(VtStatus::InvalidArgument, "turn is an answer"),
        };
        *out_len = ids.len();
        if ids.len() > cap {
            return fail(VtStatus::BufferTooSmall, format!("need room for {} ids", ids.len()));
        }
        if !ids.is_empty() {
            if buf.is_null() {
                return fail(VtStatus::NullPointer, "buf is null");
            }
            std::slice::from_raw_parts_mut(buf, ids.len()).copy_from_slice(ids);
        }
        Ok(())
    })
}

/// Answer text of an answer action.
///
/// # Safety
/// `turn` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vt_turn_answer(turn: *const VtTurn, out: *mut *mut c_char) -> VtStatus {
    guard(|| {
        let t = turn
            .as_ref()
            .map_or_else(|| fail(VtStatus::NullPointer, "turn is null"), Ok)?;
        let out = out_arg(out, "out")?;
        match t.0.action.answer_text() {
            Some(a) => *out = to_c_string(a)?,
            None => return fail(VtStatus::InvalidArgument, "turn is a keyframe selection"),
        }
        Ok(())
    })
}

/// Reasoning text of the turn (possibly empty).
///
/// # Safety
/// `turn` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vt_turn_reasoning(turn: *const VtTurn, out: *mut *mut c_char) -> VtStatus {
    guard(|| {
        let t = turn
            .as_ref()
            .map_or_else(|| fail(VtStatus::NullPointer, "turn is null"), Ok)?;
        *out_arg(out, "out")? = to_c_string(&t.0.reasoning)?;
        Ok(())
    })
}

/// Canonical rendering of the turn.
///
/// # Safety
/// `turn` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vt_turn_render(turn: *const VtTurn, out: *mut *mut c_char) -> VtStatus {
    guard(|| {
        let t = turn
            .as_ref()
            .map_or_else(|| fail(VtStatus::NullPointer, "turn is null"), Ok)?;
        *out_arg(out, "out")? = to_c_string(&grammar::render_turn(&t.0))?;
        Ok(())
    })
}

/// Loads a JSONL manifest. Free the handle with [`vt_manifest_free`].
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vt_manifest_load(
    path: *const c_char,
    skip_frame_check: bool,
    out: *mut *mut VtManifest,
) -> VtStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let opts = LoadOptions {
            frame_root: None,
            skip_frame_check,
        };
        match load_manifest_with(Path::new(path), &opts) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(VtManifest(m)));
                Ok(())
            }
            Err(e @ vtagent_core::data::DataError::Io { .. }) => fail(VtStatus::Io, e.to_string()),
            Err(e) => fail(VtStatus::ParseError, e.to_string()),
        }
    })
}

/// # Safety
/// `m` must come from [`vt_manifest_load`] and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn vt_manifest_free(m: *mut VtManifest) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of samples; 0 for NULL.
///
/// # Safety
/// `m` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn vt_manifest_len(m: *const VtManifest) -> usize {
    m.as_ref().map_or(0, |m| m.0.samples.len())
}

/// Sample id at `index`.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vt_manifest_sample_id(
    m: *const VtManifest,
    index: usize,
    out: *mut *mut c_char,
) -> VtStatus {
    guard(|| {
        let m = m
            .as_ref()
            .map_or_else(|| fail(VtStatus::NullPointer, "manifest is null"), Ok)?;
        let out = out_arg(out, "out")?;
        match m.0.samples.get(index) {
            Some(s) => *out = to_c_string(&s.sample_id)?,
            None => return fail(VtStatus::InvalidArgument, format!("index {index} out of range")),
        }
        Ok(())
    })
}

/// Frame count of the sample at `index`.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vt_manifest_frame_count(
    m: *const VtManifest,
    index: usize,
    out: *mut usize,
) -> VtStatus {
    guard(|| {
        let m = m
            .as_ref()
            .map_or_else(|| fail(VtStatus::NullPointer, "manifest is null"), Ok)?;
        let out = out_arg(out, "out")?;
        match m.0.samples.get(index) {
            Some(s) => *out = s.frames.len(),
            None => return fail(VtStatus::InvalidArgument, format!("index {index} out of range")),
        }
        Ok(())
    })
}
