//! GRPO, GSPO and TS-GRPO surrogates with exact gradients.
//!
//! Every loss is a maximization objective `J`. Gradients are returned with
//! respect to each member's `logp_new`; [`ObjectiveReport::param_grad`] chains
//! them through the policy's log-softmax.
//!
//! The three objectives share two kernels:
//!
//! * a token-span term `w * sum_t min(r_t A, clip(r_t) A)` over an index set,
//! * a sequence-span term `alpha * min(s A, clip(s) A)` where `s` is the
//!   geometric mean of the token ratios over the index set.
//!
//! GRPO is one token-span term over the whole completion with `w = 1/|o|`,
//! GSPO one sequence-span term, and TS-GRPO a sequence term on the answer
//! span plus a token term on the reasoning span with `w = alpha_rea/|S_rea|`.

use serde::{Deserialize, Serialize};

use crate::advantage::GroupBatch;
use crate::error::{Error, Result};
use crate::policy::{GradTable, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Grpo,
    Gspo,
    Tsgrpo,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Grpo, Algo::Gspo, Algo::Tsgrpo];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Grpo => "grpo",
            Algo::Gspo => "gspo",
            Algo::Tsgrpo => "tsgrpo",
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "grpo" => Ok(Algo::Grpo),
            "gspo" => Ok(Algo::Gspo),
            "tsgrpo" => Ok(Algo::Tsgrpo),
            _ => Err(Error::Config(format!("unknown algorithm '{s}' (expected grpo, gspo or tsgrpo)"))),
        }
    }
}

/// Clip ranges, span weights and KL weights.
///
/// GRPO clips with the reasoning range and GSPO with the answer range, so
/// TS-GRPO reduces to either one when all tokens fall in a single span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub algo: Algo,
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

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Tsgrpo,
            eps_ans_low: 0.01,
            eps_ans_high: 0.01,
            eps_rea_low: 0.2,
            eps_rea_high: 0.28,
            alpha_ans: 1.0,
            alpha_rea: 1.0,
            beta_ans: 0.0,
            beta_rea: 0.0,
            use_ref_kl: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn with_algo(algo: Algo) -> Self {
        Self { algo, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in [
            ("eps_ans_low", self.eps_ans_low),
            ("eps_ans_high", self.eps_ans_high),
            ("eps_rea_low", self.eps_rea_low),
            ("eps_rea_high", self.eps_rea_high),
        ] {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {e}")));
            }
        }
        for (name, w) in [
            ("alpha_ans", self.alpha_ans),
            ("alpha_rea", self.alpha_rea),
            ("beta_ans", self.beta_ans),
            ("beta_rea", self.beta_rea),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Value, diagnostics and `dJ/dlogp_new` of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub surrogate: f64,
    pub kl_ans: f64,
    pub kl_rea: f64,
    pub clip_fraction_ans: f64,
    pub clip_fraction_rea: f64,
    /// `token_grad[i][t] = dJ / d logp_new[i][t]`.
    pub token_grad: Vec<Vec<f64>>,
}

impl ObjectiveReport {
    /// `dJ/dlogits`, assuming each member's `logp_new` was computed from `params`.
    pub fn param_grad(&self, batch: &GroupBatch, params: &PolicyParams) -> Result<GradTable> {
        let mut grad = GradTable::zeros_like(params);
        self.accumulate_param_grad(batch, params, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * dJ/dlogits` into `out`.
    pub fn accumulate_param_grad(
        &self,
        batch: &GroupBatch,
        params: &PolicyParams,
        scale: f64,
        out: &mut GradTable,
    ) -> Result<()> {
        if self.token_grad.len() != batch.members.len() {
            return Err(Error::Input("report does not belong to this batch".into()));
        }
        for (m, g) in batch.members.iter().zip(&self.token_grad) {
            let w: Vec<f64> = g.iter().map(|x| x * scale).collect();
            params.accumulate_grad(&m.tokens, &w, out)?;
        }
        Ok(())
    }
}

/// `exp(logp_new - logp_old)`.
pub fn token_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).exp()
}

/// Geometric mean of the token ratios over `indices`.
pub fn seq_ratio(logp_new: &[f64], logp_old: &[f64], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Input("sequence ratio over an empty span".into()));
    }
    check_indices(indices, logp_new.len().min(logp_old.len()))?;
    Ok(mean_log_ratio(logp_new, logp_old, indices).exp())
}

fn mean_log_ratio(logp_new: &[f64], logp_old: &[f64], indices: &[usize]) -> f64 {
    let sum: f64 = indices.iter().map(|&t| logp_new[t] - logp_old[t]).sum();
    sum / indices.len() as f64
}

/// `min(max(x, 1 - eps_low), 1 + eps_high)`.
pub fn clip_asym(x: f64, eps_low: f64, eps_high: f64) -> f64 {
    x.max(1.0 - eps_low).min(1.0 + eps_high)
}

/// Per-token k3 estimate `e^(ref-new) - (ref-new) - 1`.
pub fn k3(logp_new: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_new;
    d.exp_m1() - d
}

/// k3 averaged over `indices`; 0 for an empty set.
pub fn kl_span(logp_new: &[f64], logp_ref: &[f64], indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let sum: f64 = indices.iter().map(|&t| k3(logp_new[t], logp_ref[t])).sum();
    sum / indices.len() as f64
}

fn check_indices(indices: &[usize], len: usize) -> Result<()> {
    match indices.iter().find(|&&t| t >= len) {
        Some(t) => Err(Error::Input(format!("span index {t} outside sequence of length {len}"))),
        None => Ok(()),
    }
}

/// One PPO term: `(value, d value / d ratio, clipped branch selected)`.
/// The unclipped branch wins ties.
#[inline]
pub(crate) fn ppo_term(ratio: f64, adv: f64, eps_low: f64, eps_high: f64) -> (f64, f64, bool) {
    let unclipped = ratio * adv;
    let clipped = clip_asym(ratio, eps_low, eps_high) * adv;
    if unclipped <= clipped {
        (unclipped, adv, false)
    } else {
        (clipped, 0.0, true)
    }
}

#[derive(Debug, Clone, Copy)]
struct Clip {
    low: f64,
    high: f64,
}

/// Token-level term `w * sum_t ppo(r_t)`. Writes `scale * dterm/dlogp_new_t`
/// into `grad`. Returns `(value, clipped token count)`.
#[allow(clippy::too_many_arguments)]
fn token_span_term(
    new: &[f64],
    old: &[f64],
    indices: &[usize],
    adv: f64,
    clip: Clip,
    w: f64,
    scale: f64,
    grad: &mut [f64],
) -> (f64, usize) {
    if indices.is_empty() {
        return (0.0, 0);
    }
    let mut sum = 0.0;
    let mut clipped = 0;
    for &t in indices {
        let r = token_ratio(new[t], old[t]);
        let (v, dv, c) = ppo_term(r, adv, clip.low, clip.high);
        sum += v;
        clipped += c as usize;
        grad[t] += scale * w * dv * r;
    }
    (w * sum, clipped)
}

/// Sequence-level term `alpha * ppo(s)`; the gradient of `log s` spreads
/// uniformly as `1/|indices|` over the span.
#[allow(clippy::too_many_arguments)]
fn seq_span_term(
    new: &[f64],
    old: &[f64],
    indices: &[usize],
    adv: f64,
    clip: Clip,
    alpha: f64,
    scale: f64,
    grad: &mut [f64],
) -> (f64, bool) {
    if indices.is_empty() {
        return (0.0, false);
    }
    let s = mean_log_ratio(new, old, indices).exp();
    let (v, dv, c) = ppo_term(s, adv, clip.low, clip.high);
    let coef = scale * alpha * dv * s / indices.len() as f64;
    for &t in indices {
        grad[t] += coef;
    }
    (alpha * v, c)
}

/// KL penalty bookkeeping: returns the span-averaged k3 and, when `beta != 0`,
/// writes `-beta * scale * dKL/dlogp_new` into `grad`.
fn kl_term(new: &[f64], reference: &[f64], indices: &[usize], beta: f64, scale: f64, grad: &mut [f64]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let n = indices.len() as f64;
    if beta != 0.0 {
        for &t in indices {
            grad[t] -= beta * scale * (1.0 - (reference[t] - new[t]).exp()) / n;
        }
    }
    kl_span(new, reference, indices)
}

#[derive(Default)]
struct Tally {
    terms: f64,
    kl_ans: f64,
    kl_rea: f64,
    clipped_ans: usize,
    count_ans: usize,
    clipped_rea: usize,
    count_rea: usize,
}

fn check_batch(batch: &GroupBatch, cfg: &ObjectiveConfig) -> Result<()> {
    cfg.validate()?;
    batch.validate()?;
    if cfg.use_ref_kl && batch.members.iter().any(|m| m.logp_ref.is_none()) {
        return Err(Error::Input("use_ref_kl is set but a member has no reference log-probabilities".into()));
    }
    Ok(())
}

fn finish(t: Tally, g: usize, cfg: &ObjectiveConfig, token_grad: Vec<Vec<f64>>) -> Result<ObjectiveReport> {
    let gf = g as f64;
    let kl_ans = t.kl_ans / gf;
    let kl_rea = t.kl_rea / gf;
    let (pen_ans, pen_rea) = if cfg.use_ref_kl { (cfg.beta_ans, cfg.beta_rea) } else { (0.0, 0.0) };
    let surrogate = t.terms / gf - pen_ans * kl_ans - pen_rea * kl_rea;
    let frac = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    if !surrogate.is_finite() || token_grad.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("objective value {surrogate} or its gradient")));
    }
    Ok(ObjectiveReport {
        surrogate,
        kl_ans,
        kl_rea,
        clip_fraction_ans: frac(t.clipped_ans, t.count_ans),
        clip_fraction_rea: frac(t.clipped_rea, t.count_rea),
        token_grad,
    })
}

fn kl_weights(cfg: &ObjectiveConfig) -> (f64, f64) {
    if cfg.use_ref_kl {
        (cfg.beta_ans, cfg.beta_rea)
    } else {
        (0.0, 0.0)
    }
}

/// Token-level GRPO on `adv_total` with the reasoning clip range. The KL term
/// covers the whole completion and is reported (and weighted) as `kl_rea`.
pub fn grpo_loss(batch: &GroupBatch, cfg: &ObjectiveConfig) -> Result<ObjectiveReport> {
    check_batch(batch, cfg)?;
    let g = batch.members.len();
    let inv_g = 1.0 / g as f64;
    let clip = Clip { low: cfg.eps_rea_low, high: cfg.eps_rea_high };
    let (_, beta) = kl_weights(cfg);
    let mut tally = Tally::default();
    let mut token_grad = Vec::with_capacity(g);
    for (i, m) in batch.members.iter().enumerate() {
        let len = m.len();
        let all: Vec<usize> = (0..len).collect();
        let mut grad = vec![0.0; len];
        let w = if len == 0 { 0.0 } else { 1.0 / len as f64 };
        let (v, c) = token_span_term(&m.logp_new, &m.logp_old, &all, batch.adv_total[i], clip, w, inv_g, &mut grad);
        tally.terms += v;
        tally.clipped_rea += c;
        tally.count_rea += len;
        if let Some(r) = &m.logp_ref {
            tally.kl_rea += kl_term(&m.logp_new, r, &all, beta, inv_g, &mut grad);
        }
        token_grad.push(grad);
    }
    finish(tally, g, cfg, token_grad)
}

/// Sequence-level GSPO on `adv_total` with the answer clip range. The KL
/// term covers the whole completion and is reported (and weighted) as `kl_ans`.
pub fn gspo_loss(batch: &GroupBatch, cfg: &ObjectiveConfig) -> Result<ObjectiveReport> {
    check_batch(batch, cfg)?;
    let g = batch.members.len();
    let inv_g = 1.0 / g as f64;
    let clip = Clip { low: cfg.eps_ans_low, high: cfg.eps_ans_high };
    let (beta, _) = kl_weights(cfg);
    let mut tally = Tally::default();
    let mut token_grad = Vec::with_capacity(g);
    for (i, m) in batch.members.iter().enumerate() {
        let all: Vec<usize> = (0..m.len()).collect();
        let mut grad = vec![0.0; m.len()];
        let (v, c) = seq_span_term(&m.logp_new, &m.logp_old, &all, batch.adv_total[i], clip, 1.0, inv_g, &mut grad);
        tally.terms += v;
        if !all.is_empty() {
            tally.clipped_ans += c as usize;
            tally.count_ans += 1;
        }
        if let Some(r) = &m.logp_ref {
            tally.kl_ans += kl_term(&m.logp_new, r, &all, beta, inv_g, &mut grad);
        }
        token_grad.push(grad);
    }
    finish(tally, g, cfg, token_grad)
}

/// Span-mixed objective: a sequence-level term on the answer span driven by
/// `adv_ans` and a token-level term on the reasoning span driven by `adv_rea`.
/// An empty span contributes exactly 0.
pub fn tsgrpo_loss(batch: &GroupBatch, cfg: &ObjectiveConfig) -> Result<ObjectiveReport> {
    check_batch(batch, cfg)?;
    let g = batch.members.len();
    let inv_g = 1.0 / g as f64;
    let clip_ans = Clip { low: cfg.eps_ans_low, high: cfg.eps_ans_high };
    let clip_rea = Clip { low: cfg.eps_rea_low, high: cfg.eps_rea_high };
    let (beta_ans, beta_rea) = kl_weights(cfg);
    let mut tally = Tally::default();
    let mut token_grad = Vec::with_capacity(g);
    for (i, m) in batch.members.iter().enumerate() {
        let (ans, rea) = (m.span.ans(), m.span.rea());
        let mut grad = vec![0.0; m.len()];
        let (va, ca) =
            seq_span_term(&m.logp_new, &m.logp_old, ans, batch.adv_ans[i], clip_ans, cfg.alpha_ans, inv_g, &mut grad);
        let w = if rea.is_empty() { 0.0 } else { cfg.alpha_rea / rea.len() as f64 };
        let (vr, cr) = token_span_term(&m.logp_new, &m.logp_old, rea, batch.adv_rea[i], clip_rea, w, inv_g, &mut grad);
        tally.terms += va + vr;
        if !ans.is_empty() {
            tally.clipped_ans += ca as usize;
            tally.count_ans += 1;
        }
        tally.clipped_rea += cr;
        tally.count_rea += rea.len();
        if let Some(r) = &m.logp_ref {
            tally.kl_ans += kl_term(&m.logp_new, r, ans, beta_ans, inv_g, &mut grad);
            tally.kl_rea += kl_term(&m.logp_new, r, rea, beta_rea, inv_g, &mut grad);
        }
        token_grad.push(grad);
    }
    finish(tally, g, cfg, token_grad)
}

/// Dispatches on `cfg.algo`.
pub fn evaluate(batch: &GroupBatch, cfg: &ObjectiveConfig) -> Result<ObjectiveReport> {
    match cfg.algo {
        Algo::Grpo => grpo_loss(batch, cfg),
        Algo::Gspo => gspo_loss(batch, cfg),
        Algo::Tsgrpo => tsgrpo_loss(batch, cfg),
    }
}
