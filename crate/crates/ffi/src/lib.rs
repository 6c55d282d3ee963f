//! C ABI over the `spanpo` kernels.
//!
//! Every fallible function returns an [`SpStatus`]; on failure a message is
//! available from [`sp_last_error`] on the same thread. Objects are opaque
//! handles created by `*_new`/`*_load` and released with the matching
//! `*_free`. Input enums are plain `uint32_t` values from the `SP_*`
//! constants so that out-of-range values are reported, not undefined.
//!
//! Panics never cross the boundary; they surface as `SP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use spanpo::advantage::{group_normalize, GroupBatch};
use spanpo::objective::{clip_asym, evaluate, seq_ratio, token_ratio, Algo, ObjectiveConfig};
use spanpo::policy::{read_checkpoint, write_checkpoint, CompletionRecord, PolicyMode, PolicyParams, TokenId};
use spanpo::reward::{aggregate, format_reward, Channel, Channels, WeightProfile};
use spanpo::segment::{segment, Grammar, LayoutTag, SpanMask};
use spanpo::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Invariant = 4,
    NonFinite = 5,
    Transport = 6,
    Parse = 7,
    Io = 8,
    Utf8 = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

pub const SP_ALGO_GRPO: u32 = 0;
pub const SP_ALGO_GSPO: u32 = 1;
pub const SP_ALGO_TSGRPO: u32 = 2;

pub const SP_MODE_POSITIONWISE: u32 = 0;
pub const SP_MODE_BIGRAM: u32 = 1;

pub const SP_GRAMMAR_PLAN_SQL: u32 = 0;
pub const SP_GRAMMAR_THINK_ANSWER: u32 = 1;

pub const SP_PROFILE_SPIDER: u32 = 0;
pub const SP_PROFILE_THINKQUEL: u32 = 1;

/// Number of reward channels, in the order format, sl_table, sl_column,
/// pf_table, pf_column, execution, match.
pub const SP_CHANNELS: usize = 7;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Input(_) => SpStatus::InvalidInput,
            Error::Config(_) => SpStatus::Config,
            Error::Invariant(_) => SpStatus::Invariant,
            Error::NonFinite(_) => SpStatus::NonFinite,
            Error::Transport(_) => SpStatus::Transport,
            Error::Parse(_) => SpStatus::Parse,
            Error::Io(_) => SpStatus::Io,
        };
        Failure(code, e.to_string())
    }
}

fn fail<T>(code: SpStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(code, msg.into()))
}

/// Runs `f`, converting errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SpStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(SpStatus::NullPointer, format!("{name} is null"));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn slice_out<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return fail(SpStatus::NullPointer, format!("{name} is null"));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(SpStatus::NullPointer, format!("{name} is null")))
}

unsafe fn str_in<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(SpStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Failure(SpStatus::Utf8, format!("{name}: {e}")))
}

fn algo_from(v: u32) -> Result<Algo, Failure> {
    match v {
        SP_ALGO_GRPO => Ok(Algo::Grpo),
        SP_ALGO_GSPO => Ok(Algo::Gspo),
        SP_ALGO_TSGRPO => Ok(Algo::Tsgrpo),
        _ => fail(SpStatus::InvalidInput, format!("unknown algo {v}")),
    }
}

fn algo_to(a: Algo) -> u32 {
    match a {
        Algo::Grpo => SP_ALGO_GRPO,
        Algo::Gspo => SP_ALGO_GSPO,
        Algo::Tsgrpo => SP_ALGO_TSGRPO,
    }
}

fn grammar_from(v: u32) -> Result<Grammar, Failure> {
    match v {
        SP_GRAMMAR_PLAN_SQL => Ok(Grammar::PlanSql),
        SP_GRAMMAR_THINK_ANSWER => Ok(Grammar::ThinkAnswer),
        _ => fail(SpStatus::InvalidInput, format!("unknown grammar {v}")),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Group-normalized advantages of `n` rewards, written to `out[0..n]`.
///
/// # Safety
/// `rewards` and `out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sp_group_normalize(rewards: *const f64, n: usize, out: *mut f64) -> SpStatus {
    guard(|| {
        let r = slice_in(rewards, n, "rewards")?;
        let o = slice_out(out, n, "out")?;
        o.copy_from_slice(&group_normalize(r)?);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn sp_token_ratio(logp_new: f64, logp_old: f64) -> f64 {
    token_ratio(logp_new, logp_old)
}

#[no_mangle]
pub extern "C" fn sp_clip_asym(x: f64, eps_low: f64, eps_high: f64) -> f64 {
    clip_asym(x, eps_low, eps_high)
}

/// Length-normalized sequence ratio over the token positions in `indices`.
///
/// # Safety
/// `logp_new`/`logp_old` must hold `len` doubles and `indices` `n_indices` entries.
#[no_mangle]
pub unsafe extern "C" fn sp_seq_ratio(
    logp_new: *const f64,
    logp_old: *const f64,
    len: usize,
    indices: *const usize,
    n_indices: usize,
    out: *mut f64,
) -> SpStatus {
    guard(|| {
        let new = slice_in(logp_new, len, "logp_new")?;
        let old = slice_in(logp_old, len, "logp_old")?;
        let idx = slice_in(indices, n_indices, "indices")?;
        *out_ref(out, "out")? = seq_ratio(new, old, idx)?;
        Ok(())
    })
}

/// Opaque tabular policy.
pub struct SpPolicy(PolicyParams);

/// Creates a policy from a row-major logit table (`rows x vocab`, where rows
/// is the horizon in positionwise mode and the vocabulary size in bigram mode).
///
/// # Safety
/// `logits` must hold `n_logits` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_policy_new(
    mode: u32,
    horizon: usize,
    vocab: usize,
    eos: u32,
    logits: *const f64,
    n_logits: usize,
    out: *mut *mut SpPolicy,
) -> SpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let mode = match mode {
            SP_MODE_POSITIONWISE => PolicyMode::Positionwise,
            SP_MODE_BIGRAM => PolicyMode::Bigram,
            _ => return fail(SpStatus::InvalidInput, format!("unknown policy mode {mode}")),
        };
        let l = slice_in(logits, n_logits, "logits")?;
        let p = PolicyParams::new(mode, horizon, vocab, eos, l.to_vec())?;
        *out = Box::into_raw(Box::new(SpPolicy(p)));
        Ok(())
    })
}

/// Reads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_policy_load(path: *const c_char, out: *mut *mut SpPolicy) -> SpStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let path = str_in(path, "path")?;
        let f = File::open(path).map_err(|e| Failure(SpStatus::Io, format!("{path}: {e}")))?;
        *out = Box::into_raw(Box::new(SpPolicy(read_checkpoint(BufReader::new(f))?)));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `policy` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_policy_save(policy: *const SpPolicy, path: *const c_char) -> SpStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| Failure(SpStatus::NullPointer, "policy is null".into()))?;
        let path = str_in(path, "path")?;
        let f = File::create(path).map_err(|e| Failure(SpStatus::Io, format!("{path}: {e}")))?;
        write_checkpoint(&p.0, BufWriter::new(f))?;
        Ok(())
    })
}

/// # Safety
/// `policy` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sp_policy_free(policy: *mut SpPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Per-token log-probabilities of `tokens` under `policy`.
///
/// # Safety
/// `tokens` and `out` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn sp_policy_logprob(
    policy: *const SpPolicy,
    tokens: *const u32,
    n: usize,
    out: *mut f64,
) -> SpStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| Failure(SpStatus::NullPointer, "policy is null".into()))?;
        let t: &[TokenId] = slice_in(tokens, n, "tokens")?;
        slice_out(out, n, "out")?.copy_from_slice(&p.0.logprob(t)?);
        Ok(())
    })
}

/// Opaque group of completions under construction.
#[derive(Default)]
pub struct SpBatch {
    members: Vec<CompletionRecord>,
    adv_ans: Vec<f64>,
    adv_rea: Vec<f64>,
    adv_total: Vec<f64>,
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_batch_new(out: *mut *mut SpBatch) -> SpStatus {
    guard(|| {
        *out_ref(out, "out")? = Box::into_raw(Box::<SpBatch>::default());
        Ok(())
    })
}

/// # Safety
/// `batch` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sp_batch_free(batch: *mut SpBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

/// Appends one completion. `logp_ref` may be null. `answer_flags[t]` is
/// nonzero for answer-span tokens; the rest are reasoning.
///
/// # Safety
/// All arrays must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn sp_batch_push(
    batch: *mut SpBatch,
    tokens: *const u32,
    len: usize,
    logp_old: *const f64,
    logp_new: *const f64,
    logp_ref: *const f64,
    answer_flags: *const u8,
    adv_ans: f64,
    adv_rea: f64,
    adv_total: f64,
) -> SpStatus {
    guard(|| {
        let b = out_ref(batch, "batch")?;
        let flags: Vec<bool> = slice_in(answer_flags, len, "answer_flags")?.iter().map(|&f| f != 0).collect();
        let layout = if flags.iter().any(|&f| f) { LayoutTag::PlanSql } else { LayoutTag::FallbackAllRea };
        let member = CompletionRecord {
            tokens: slice_in(tokens, len, "tokens")?.to_vec(),
            logp_old: slice_in(logp_old, len, "logp_old")?.to_vec(),
            logp_new: slice_in(logp_new, len, "logp_new")?.to_vec(),
            logp_ref: if logp_ref.is_null() { None } else { Some(slice_in(logp_ref, len, "logp_ref")?.to_vec()) },
            span: SpanMask::from_answer_flags(&flags, layout),
        };
        member.validate()?;
        b.members.push(member);
        b.adv_ans.push(adv_ans);
        b.adv_rea.push(adv_rea);
        b.adv_total.push(adv_total);
        Ok(())
    })
}

/// Members pushed so far, or 0 for null.
///
/// # Safety
/// `batch` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn sp_batch_len(batch: *const SpBatch) -> usize {
    batch.as_ref().map_or(0, |b| b.members.len())
}

/// Total tokens over all members: the size `sp_objective_compute` needs for
/// its gradient buffer.
///
/// # Safety
/// `batch` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn sp_batch_total_tokens(batch: *const SpBatch) -> usize {
    batch.as_ref().map_or(0, |b| b.members.iter().map(|m| m.len()).sum())
}

/// Objective settings; `algo` is one of the `SP_ALGO_*` constants.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpObjectiveConfig {
    pub algo: u32,
    pub eps_ans_low: f64,
    pub eps_ans_high: f64,
    pub eps_rea_low: f64,
    pub eps_rea_high: f64,
    pub alpha_ans: f64,
    pub alpha_rea: f64,
    pub beta_ans: f64,
    pub beta_rea: f64,
    pub use_ref_kl: bool,
}

impl SpObjectiveConfig {
    fn to_config(self) -> Result<ObjectiveConfig, Failure> {
        Ok(ObjectiveConfig {
            algo: algo_from(self.algo)?,
            eps_ans_low: self.eps_ans_low,
            eps_ans_high: self.eps_ans_high,
            eps_rea_low: self.eps_rea_low,
            eps_rea_high: self.eps_rea_high,
            alpha_ans: self.alpha_ans,
            alpha_rea: self.alpha_rea,
            beta_ans: self.beta_ans,
            beta_rea: self.beta_rea,
            use_ref_kl: self.use_ref_kl,
        })
    }
}

/// Default settings for `algo`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_objective_config_default(algo: u32, out: *mut SpObjectiveConfig) -> SpStatus {
    guard(|| {
        let c = ObjectiveConfig::with_algo(algo_from(algo)?);
        *out_ref(out, "out")? = SpObjectiveConfig {
            algo: algo_to(c.algo),
            eps_ans_low: c.eps_ans_low,
            eps_ans_high: c.eps_ans_high,
            eps_rea_low: c.eps_rea_low,
            eps_rea_high: c.eps_rea_high,
            alpha_ans: c.alpha_ans,
            alpha_rea: c.alpha_rea,
            beta_ans: c.beta_ans,
            beta_rea: c.beta_rea,
            use_ref_kl: c.use_ref_kl,
        };
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpObjectiveSummary {
    pub surrogate: f64,
    pub kl_ans: f64,
    pub kl_rea: f64,
    pub clip_fraction_ans: f64,
    pub clip_fraction_rea: f64,
}

/// Evaluates the objective on the batch. When `token_grad` is non-null it
/// receives `dJ/dlogp_new` for every token, members concatenated in push
/// order; `grad_capacity` must be at least `sp_batch_total_tokens(batch)`.
///
/// # Safety
/// `batch` and `config` must be valid; `token_grad` null or holding `grad_capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn sp_objective_compute(
    batch: *const SpBatch,
    config: *const SpObjectiveConfig,
    summary: *mut SpObjectiveSummary,
    token_grad: *mut f64,
    grad_capacity: usize,
) -> SpStatus {
    guard(|| {
        let b = batch.as_ref().ok_or_else(|| Failure(SpStatus::NullPointer, "batch is null".into()))?;
        let cfg = config.as_ref().ok_or_else(|| Failure(SpStatus::NullPointer, "config is null".into()))?;
        let summary = out_ref(summary, "summary")?;
        let group = GroupBatch::from_advantages(
            0,
            b.members.clone(),
            b.adv_ans.clone(),
            b.adv_rea.clone(),
            b.adv_total.clone(),
        )?;
        let report = evaluate(&group, &cfg.to_config()?)?;
        if !token_grad.is_null() {
            let need: usize = report.token_grad.iter().map(Vec::len).sum();
            if grad_capacity < need {
                return fail(
                    SpStatus::BufferTooSmall,
                    format!("token_grad holds {grad_capacity} values, {need} needed"),
                );
            }
            let out = slice_out(token_grad, need, "token_grad")?;
            for (dst, src) in out.iter_mut().zip(report.token_grad.iter().flatten()) {
                *dst = *src;
            }
        }
        *summary = SpObjectiveSummary {
            surrogate: report.surrogate,
            kl_ans: report.kl_ans,
            kl_rea: report.kl_rea,
            clip_fraction_ans: report.clip_fraction_ans,
            clip_fraction_rea: report.clip_fraction_rea,
        };
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpSpanRewards {
    pub r_ans: f64,
    pub r_rea: f64,
    pub r_total: f64,
    /// Bit `c` is set when channel `c` has nonzero weight but was not present.
    pub missing_mask: u32,
}

/// Aggregates `SP_CHANNELS` channel values under a named profile. `present`
/// may be null (all channels present); otherwise a zero entry marks a channel
/// as not scored.
///
/// # Safety
/// `channels` (and `present` when non-null) must hold `SP_CHANNELS` elements.
#[no_mangle]
pub unsafe extern "C" fn sp_aggregate(
    channels: *const f64,
    present: *const u8,
    profile: u32,
    out: *mut SpSpanRewards,
) -> SpStatus {
    guard(|| {
        let v = slice_in(channels, SP_CHANNELS, "channels")?;
        let p: Vec<bool> = if present.is_null() {
            vec![true; SP_CHANNELS]
        } else {
            slice_in(present, SP_CHANNELS, "present")?.iter().map(|&x| x != 0).collect()
        };
        let profile = match profile {
            SP_PROFILE_SPIDER => WeightProfile::spider(),
            SP_PROFILE_THINKQUEL => WeightProfile::thinkquel(),
            _ => return fail(SpStatus::InvalidInput, format!("unknown profile {profile}")),
        };
        let get = |i: usize| p[i].then_some(v[i]);
        let ch = Channels {
            format: get(0),
            sl_table: get(1),
            sl_column: get(2),
            pf_table: get(3),
            pf_column: get(4),
            execution: get(5),
            match_: get(6),
        };
        let agg = aggregate(&ch, &profile);
        let mask = agg
            .missing
            .iter()
            .map(|c| 1u32 << Channel::ALL.iter().position(|x| x == c).expect("known channel"))
            .fold(0, |a, b| a | b);
        *out_ref(out, "out")? =
            SpSpanRewards { r_ans: agg.r_ans, r_rea: agg.r_rea, r_total: agg.r_total, missing_mask: mask };
        Ok(())
    })
}

/// 1.0 when the text has a plan yml block and an answer block, else 0.0.
///
/// # Safety
/// `text` must be a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_format_reward(text: *const c_char, out: *mut f64) -> SpStatus {
    guard(|| {
        let t = str_in(text, "text")?;
        *out_ref(out, "out")? = format_reward(t);
        Ok(())
    })
}

/// Segments `text` given token character ranges (`offsets[2k]`, `offsets[2k+1]`
/// for token k, counted in Unicode scalar values). Writes 1 into
/// `answer_flags[k]` for answer-span tokens and 0 otherwise.
///
/// # Safety
/// `offsets` must hold `2 * n_tokens` values and `answer_flags` `n_tokens`.
#[no_mangle]
pub unsafe extern "C" fn sp_segment(
    text: *const c_char,
    offsets: *const usize,
    n_tokens: usize,
    grammar: u32,
    answer_flags: *mut u8,
) -> SpStatus {
    guard(|| {
        let t = str_in(text, "text")?;
        let raw = slice_in(offsets, 2 * n_tokens, "offsets")?;
        let pairs: Vec<(usize, usize)> = raw.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let mask = segment(t, &pairs, grammar_from(grammar)?)?;
        let flags = mask.answer_flags(n_tokens)?;
        for (dst, f) in slice_out(answer_flags, n_tokens, "answer_flags")?.iter_mut().zip(flags) {
            *dst = f as u8;
        }
        Ok(())
    })
}
