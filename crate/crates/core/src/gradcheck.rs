//! Finite-difference verification of the objective gradients.
//!
//! Each suite draws random tabular policies, a perturbed behavior policy,
//! random span masks, advantages, clip ranges and KL settings, then compares
//! `dJ/dlogits` from [`ObjectiveReport::param_grad`](crate::ObjectiveReport::param_grad) against central
//! differences of the surrogate value over every logit.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::GroupBatch;
use crate::error::Result;
use crate::objective::{evaluate, seq_ratio, token_ratio, Algo, ObjectiveConfig};
use crate::policy::{CompletionRecord, GradTable, PolicyMode, PolicyParams, TokenId};
use crate::segment::{LayoutTag, SpanMask};

/// Distance from a clip boundary below which a draw is rejected: the
/// surrogate has a kink there and central differences straddle it.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub batches: usize,
    pub seed: u64,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { batches: 100, seed: 0, h: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub batches: usize,
    /// Draws thrown away for sitting too close to a clip boundary.
    pub resampled: usize,
    pub max_rel_error: f64,
    /// Batches in which at least one term took the clipped branch.
    pub batches_with_clipping: usize,
    pub passed: bool,
    #[serde(with = "secs")]
    pub elapsed: Duration,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_params(rng: &mut ChaCha8Rng, mode: PolicyMode, horizon: usize, vocab: usize) -> Result<PolicyParams> {
    let rows = match mode {
        PolicyMode::Positionwise => horizon,
        PolicyMode::Bigram => vocab,
    };
    let logits = (0..rows * vocab).map(|_| uniform(rng, -1.5, 1.5)).collect();
    PolicyParams::new(mode, horizon, vocab, (vocab - 1) as TokenId, logits)
}

fn perturbed(rng: &mut ChaCha8Rng, p: &PolicyParams, scale: f64) -> Result<PolicyParams> {
    let logits = p.logits().iter().map(|x| x + uniform(rng, -scale, scale)).collect();
    PolicyParams::new(p.mode(), p.horizon(), p.vocab(), p.eos(), logits)
}

/// Random sequence ending at EOS or the horizon, with no EOS before the end.
fn random_tokens(rng: &mut ChaCha8Rng, horizon: usize, vocab: usize) -> Vec<TokenId> {
    let len = rng.random_range(1..=horizon);
    let eos = (vocab - 1) as TokenId;
    let mut tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..eos)).collect();
    if len < horizon || rng.random_bool(0.5) {
        *tokens.last_mut().unwrap() = eos;
    }
    tokens
}

fn random_span(rng: &mut ChaCha8Rng, len: usize) -> SpanMask {
    match rng.random_range(0..4) {
        0 => SpanMask::all_answer(len, LayoutTag::PlanSql),
        1 => SpanMask::all_reasoning(len),
        _ => {
            // reasoning prefix, answer block, reasoning suffix
            let a = rng.random_range(0..=len);
            let b = rng.random_range(a..=len);
            let flags: Vec<bool> = (0..len).map(|t| t >= a && t < b).collect();
            SpanMask::from_answer_flags(&flags, LayoutTag::PlanSql)
        }
    }
}

fn random_config(rng: &mut ChaCha8Rng, algo: Algo) -> ObjectiveConfig {
    let use_ref_kl = rng.random_bool(0.5);
    ObjectiveConfig {
        algo,
        eps_ans_low: uniform(rng, 0.01, 0.3),
        eps_ans_high: uniform(rng, 0.01, 0.3),
        eps_rea_low: uniform(rng, 0.05, 0.3),
        eps_rea_high: uniform(rng, 0.05, 0.3),
        alpha_ans: uniform(rng, 0.0, 2.0),
        alpha_rea: uniform(rng, 0.0, 2.0),
        beta_ans: if use_ref_kl { uniform(rng, 0.0, 0.5) } else { 0.0 },
        beta_rea: if use_ref_kl { uniform(rng, 0.0, 0.5) } else { 0.0 },
        use_ref_kl,
    }
}

/// One randomized case: policy, batch built under it, and objective settings.
pub struct Case {
    pub params: PolicyParams,
    pub batch: GroupBatch,
    pub config: ObjectiveConfig,
}

fn near_boundary(r: f64, low: f64, high: f64) -> bool {
    (r - (1.0 - low)).abs() < KINK_MARGIN || (r - (1.0 + high)).abs() < KINK_MARGIN
}

impl Case {
    /// True when any ratio the objective clips sits within [`KINK_MARGIN`] of a boundary.
    pub fn near_kink(&self) -> Result<bool> {
        let c = &self.config;
        for m in &self.batch.members {
            let all: Vec<usize> = (0..m.len()).collect();
            let (ans, rea) = (m.span.ans(), m.span.rea());
            let seq = |idx: &[usize]| -> Result<Option<f64>> {
                if idx.is_empty() {
                    Ok(None)
                } else {
                    seq_ratio(&m.logp_new, &m.logp_old, idx).map(Some)
                }
            };
            let tok =
                |idx: &[usize]| idx.iter().map(|&t| token_ratio(m.logp_new[t], m.logp_old[t])).collect::<Vec<_>>();
            let hit = match c.algo {
                Algo::Grpo => tok(&all).into_iter().any(|r| near_boundary(r, c.eps_rea_low, c.eps_rea_high)),
                Algo::Gspo => seq(&all)?.is_some_and(|s| near_boundary(s, c.eps_ans_low, c.eps_ans_high)),
                Algo::Tsgrpo => {
                    seq(ans)?.is_some_and(|s| near_boundary(s, c.eps_ans_low, c.eps_ans_high))
                        || tok(rea).into_iter().any(|r| near_boundary(r, c.eps_rea_low, c.eps_rea_high))
                }
            };
            if hit {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Surrogate with `logp_new` recomputed from `logits`.
    pub fn value_at(&self, logits: &[f64]) -> Result<f64> {
        let p = &self.params;
        let params = PolicyParams::new(p.mode(), p.horizon(), p.vocab(), p.eos(), logits.to_vec())?;
        let mut batch = self.batch.clone();
        for m in &mut batch.members {
            m.refresh_new(&params)?;
        }
        Ok(evaluate(&batch, &self.config)?.surrogate)
    }

    /// Analytic `dJ/dlogits` and whether any term was clipped.
    pub fn analytic(&self) -> Result<(GradTable, bool)> {
        let report = evaluate(&self.batch, &self.config)?;
        let clipped = report.clip_fraction_ans > 0.0 || report.clip_fraction_rea > 0.0;
        Ok((report.param_grad(&self.batch, &self.params)?, clipped))
    }
}

/// Draws one case. Lengths, spans, advantage signs and clip activation all vary.
pub fn random_case(rng: &mut ChaCha8Rng, algo: Algo) -> Result<Case> {
    let mode = if rng.random_bool(0.5) { PolicyMode::Positionwise } else { PolicyMode::Bigram };
    let horizon = rng.random_range(2..=8);
    let vocab = rng.random_range(3..=6);
    let params = random_params(rng, mode, horizon, vocab)?;
    let old = perturbed(rng, &params, 0.3)?;
    let reference = perturbed(rng, &params, 0.5)?;
    let g = rng.random_range(2..=6);
    let mut members = Vec::with_capacity(g);
    for _ in 0..g {
        let tokens = random_tokens(rng, horizon, vocab);
        let span = random_span(rng, tokens.len());
        members.push(CompletionRecord {
            logp_old: old.logprob(&tokens)?,
            logp_new: params.logprob(&tokens)?,
            logp_ref: Some(reference.logprob(&tokens)?),
            tokens,
            span,
        });
    }
    let mut adv = || (0..g).map(|_| uniform(rng, -2.0, 2.0)).collect::<Vec<f64>>();
    let (adv_ans, adv_rea, adv_total) = (adv(), adv(), adv());
    let batch = GroupBatch::from_advantages(0, members, adv_ans, adv_rea, adv_total)?;
    let config = random_config(rng, algo);
    Ok(Case { params, batch, config })
}

/// Max relative error of the analytic gradient over all logits.
pub fn check_case(case: &Case, h: f64) -> Result<f64> {
    let (grad, _) = case.analytic()?;
    let mut logits = case.params.logits().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..logits.len() {
        let x = logits[i];
        logits[i] = x + h;
        let up = case.value_at(&logits)?;
        logits[i] = x - h;
        let down = case.value_at(&logits)?;
        logits[i] = x;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_error(grad.as_slice()[i], numeric));
    }
    Ok(worst)
}

/// Runs the finite-difference suite for one objective.
pub fn objective_suite(algo: Algo, cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(algo as u64 + 1);
    let (mut done, mut resampled, mut clipped_batches) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    while done < cfg.batches {
        let case = random_case(&mut rng, algo)?;
        if case.near_kink()? {
            resampled += 1;
            continue;
        }
        if case.analytic()?.1 {
            clipped_batches += 1;
        }
        worst = worst.max(check_case(&case, cfg.h)?);
        done += 1;
    }
    Ok(SuiteReport {
        suite: algo.name().to_string(),
        batches: done,
        resampled,
        max_rel_error: worst,
        batches_with_clipping: clipped_batches,
        passed: worst < cfg.tolerance,
        elapsed: start.elapsed(),
    })
}

/// Checks `PolicyParams::accumulate_grad` against differences of a weighted
/// sum of token log-probabilities.
pub fn policy_suite(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.batches {
        let mode = if rng.random_bool(0.5) { PolicyMode::Positionwise } else { PolicyMode::Bigram };
        let horizon = rng.random_range(1..=8);
        let vocab = rng.random_range(2..=6);
        let params = random_params(&mut rng, mode, horizon, vocab)?;
        let tokens = random_tokens(&mut rng, horizon, vocab);
        let weights: Vec<f64> = tokens.iter().map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let mut grad = GradTable::zeros_like(&params);
        params.accumulate_grad(&tokens, &weights, &mut grad)?;
        let value = |logits: &[f64]| -> Result<f64> {
            let p = PolicyParams::new(mode, horizon, vocab, params.eos(), logits.to_vec())?;
            Ok(p.logprob(&tokens)?.iter().zip(&weights).map(|(l, w)| l * w).sum())
        };
        let mut logits = params.logits().to_vec();
        for i in 0..logits.len() {
            let x = logits[i];
            logits[i] = x + cfg.h;
            let up = value(&logits)?;
            logits[i] = x - cfg.h;
            let down = value(&logits)?;
            logits[i] = x;
            worst = worst.max(rel_error(grad.as_slice()[i], (up - down) / (2.0 * cfg.h)));
        }
    }
    Ok(SuiteReport {
        suite: "policy".to_string(),
        batches: cfg.batches,
        resampled: 0,
        max_rel_error: worst,
        batches_with_clipping: 0,
        passed: worst < cfg.tolerance,
        elapsed: start.elapsed(),
    })
}

/// All suites: the three objectives, then the policy log-probability gradient.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::with_capacity(4);
    for algo in Algo::ALL {
        out.push(objective_suite(algo, cfg)?);
    }
    out.push(policy_suite(cfg)?);
    Ok(out)
}
