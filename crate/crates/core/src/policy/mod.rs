//! Tabular autoregressive categorical policy.
//!
//! The policy is a table of logits. In positionwise mode row `t` scores the
//! token at position `t`; in bigram mode the row is selected by the previous
//! token, and the end-of-sequence row doubles as the start context. Both
//! modes give closed-form log-probabilities and gradients, so every objective
//! built on top can be checked exactly against finite differences.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::SpanMask;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Positionwise,
    Bigram,
}

/// Logit table plus the shape information needed to index it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    mode: PolicyMode,
    horizon: usize,
    vocab: usize,
    eos: TokenId,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn new(mode: PolicyMode, horizon: usize, vocab: usize, eos: TokenId, logits: Vec<f64>) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if vocab < 2 {
            return Err(Error::Config("vocabulary must have at least 2 tokens".into()));
        }
        if eos as usize >= vocab {
            return Err(Error::Config(format!("eos id {eos} outside vocabulary of {vocab}")));
        }
        let rows = Self::row_count(mode, horizon, vocab);
        if logits.len() != rows * vocab {
            return Err(Error::Input(format!(
                "expected {} logits for a {rows}x{vocab} table, got {}",
                rows * vocab,
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("logit {bad} is not finite")));
        }
        Ok(Self { mode, horizon, vocab, eos, logits })
    }

    /// All-zero logits: every row is the uniform distribution.
    pub fn uniform(mode: PolicyMode, horizon: usize, vocab: usize, eos: TokenId) -> Result<Self> {
        let rows = Self::row_count(mode, horizon, vocab);
        Self::new(mode, horizon, vocab, eos, vec![0.0; rows * vocab])
    }

    fn row_count(mode: PolicyMode, horizon: usize, vocab: usize) -> usize {
        match mode {
            PolicyMode::Positionwise => horizon,
            PolicyMode::Bigram => vocab,
        }
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn rows(&self) -> usize {
        Self::row_count(self.mode, self.horizon, self.vocab)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.logits[r * self.vocab..(r + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let v = self.vocab;
        &mut self.logits[r * v..(r + 1) * v]
    }

    /// Row used to score position `t` given the tokens emitted so far.
    pub fn context_row(&self, t: usize, prefix: &[TokenId]) -> usize {
        match self.mode {
            PolicyMode::Positionwise => t,
            PolicyMode::Bigram if t == 0 => self.eos as usize,
            PolicyMode::Bigram => prefix[t - 1] as usize,
        }
    }

    /// Probability distribution of one row.
    pub fn row_probs(&self, r: usize) -> Vec<f64> {
        softmax(self.row(r))
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.horizon {
            return Err(Error::Input(format!("sequence of length {} exceeds horizon {}", tokens.len(), self.horizon)));
        }
        if let Some((t, tok)) = tokens.iter().enumerate().find(|(_, &k)| k as usize >= self.vocab) {
            return Err(Error::Input(format!("token {tok} at position {t} outside vocabulary of {}", self.vocab)));
        }
        Ok(())
    }

    /// Per-token log-probabilities of `tokens`.
    pub fn logprob(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        Ok((0..tokens.len())
            .map(|t| {
                let row = self.row(self.context_row(t, tokens));
                row[tokens[t] as usize] - log_sum_exp(row)
            })
            .collect())
    }

    /// Gradient of `sum_t logprob_t` with respect to the logit table.
    pub fn grad_logprob(&self, tokens: &[TokenId]) -> Result<GradTable> {
        let mut grad = GradTable::zeros_like(self);
        self.accumulate_grad(tokens, &vec![1.0; tokens.len()], &mut grad)?;
        Ok(grad)
    }

    /// Adds `sum_t weights[t] * d logprob_t / d logits` into `out`.
    pub fn accumulate_grad(&self, tokens: &[TokenId], weights: &[f64], out: &mut GradTable) -> Result<()> {
        self.check_tokens(tokens)?;
        if weights.len() != tokens.len() {
            return Err(Error::Input(format!("{} weights for {} tokens", weights.len(), tokens.len())));
        }
        if out.rows != self.rows() || out.cols != self.vocab {
            return Err(Error::Input("gradient table shape does not match policy".into()));
        }
        for (t, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let r = self.context_row(t, tokens);
            let probs = softmax(self.row(r));
            let dst = out.row_mut(r);
            for (k, p) in probs.iter().enumerate() {
                dst[k] -= w * p;
            }
            dst[tokens[t] as usize] += w;
        }
        Ok(())
    }

    /// `logits += step * grad`.
    pub fn apply_update(&mut self, grad: &GradTable, step: f64) -> Result<()> {
        if grad.data.len() != self.logits.len() {
            return Err(Error::Input("gradient table shape does not match policy".into()));
        }
        for (x, g) in self.logits.iter_mut().zip(&grad.data) {
            *x += step * g;
        }
        if self.logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits after update".into()));
        }
        Ok(())
    }
}

/// Dense table with the same shape as a policy's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl GradTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self::zeros(params.rows(), params.vocab())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// `self += scale * other`. Shapes must agree.
    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        assert_eq!(self.data.len(), other.data.len(), "gradient shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// One sampled response together with its per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub tokens: Vec<TokenId>,
    /// Behavior policy log-probabilities, fixed at sampling time.
    pub logp_old: Vec<f64>,
    /// Target policy log-probabilities; refreshed before each objective evaluation.
    pub logp_new: Vec<f64>,
    pub logp_ref: Option<Vec<f64>>,
    pub span: SpanMask,
}

impl CompletionRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let check = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != n {
                return Err(Error::Input(format!("{name} has {} entries for {n} tokens", v.len())));
            }
            if let Some(x) = v.iter().find(|x| !x.is_finite() || **x > 0.0) {
                return Err(Error::Input(format!("{name} contains invalid log-probability {x}")));
            }
            Ok(())
        };
        check("logp_old", &self.logp_old)?;
        check("logp_new", &self.logp_new)?;
        if let Some(r) = &self.logp_ref {
            check("logp_ref", r)?;
        }
        self.span.validate(n)
    }

    /// Recomputes `logp_new` under `params`.
    pub fn refresh_new(&mut self, params: &PolicyParams) -> Result<()> {
        self.logp_new = params.logprob(&self.tokens)?;
        Ok(())
    }
}

/// Rollout sampling knobs. `top_p = 1.0` keeps sampling untruncated, which the
/// exact-gradient tests rely on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }

    fn distribution(&self, logits: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = logits.iter().map(|x| x / self.temperature).collect();
        let mut probs = softmax(&scaled);
        if self.top_p < 1.0 {
            let mut order: Vec<usize> = (0..probs.len()).collect();
            // stable sort keeps ties in token-id order
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
            let mut cum = 0.0;
            let mut keep = vec![false; probs.len()];
            for &k in &order {
                keep[k] = true;
                cum += probs[k];
                if cum >= self.top_p {
                    break;
                }
            }
            for (p, k) in probs.iter_mut().zip(&keep) {
                if !k {
                    *p = 0.0;
                }
            }
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
        }
        probs
    }
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> TokenId {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_nonzero = k;
        }
        cum += p;
        if u < cum {
            return k as TokenId;
        }
    }
    last_nonzero as TokenId
}

/// Samples `group_size` completions with the default sampler.
pub fn sample_group(
    params: &PolicyParams,
    prompt_seed: u64,
    group_size: usize,
    rng_seed: u64,
) -> Result<Vec<CompletionRecord>> {
    sample_group_with(params, prompt_seed, group_size, rng_seed, &SamplerConfig::default())
}

/// Ancestral sampling of a group. The stream is a pure function of
/// `(rng_seed, prompt_seed)`. Completions stop after emitting EOS or at the
/// horizon. `logp_old` and `logp_new` are both set to the log-probabilities
/// under `params`; spans default to all-reasoning until a segmenter assigns them.
pub fn sample_group_with(
    params: &PolicyParams,
    prompt_seed: u64,
    group_size: usize,
    rng_seed: u64,
    sampler: &SamplerConfig,
) -> Result<Vec<CompletionRecord>> {
    if group_size < 2 {
        return Err(Error::Config(format!("group size must be at least 2 for group normalization, got {group_size}")));
    }
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(prompt_seed);
    let mut out = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let mut tokens: Vec<TokenId> = Vec::with_capacity(params.horizon());
        for t in 0..params.horizon() {
            let probs = sampler.distribution(params.row(params.context_row(t, &tokens)));
            let tok = draw(&probs, &mut rng);
            tokens.push(tok);
            if tok == params.eos() {
                break;
            }
        }
        let logp = params.logprob(&tokens)?;
        let span = SpanMask::all_reasoning(tokens.len());
        out.push(CompletionRecord { tokens, logp_old: logp.clone(), logp_new: logp, logp_ref: None, span });
    }
    Ok(out)
}
