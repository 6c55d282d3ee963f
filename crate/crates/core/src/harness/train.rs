//! Rollout, scoring and update loop.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::GroupBatch;
use crate::error::{Error, Result};
use crate::objective::{evaluate, ObjectiveReport};
use crate::policy::{sample_group_with, CompletionRecord, GradTable, PolicyParams, TokenId};
use crate::reward::RewardBreakdown;

use super::config::{OptimizerKind, TaskConfig, TrainConfig};
use super::task::{ScoredTokens, ToyTask};

/// One row of the training curve, written once per rollout step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub step: usize,
    /// Optimizer updates applied so far, including this step's.
    pub optimizer_updates: usize,
    pub mean_total_reward: f64,
    pub mean_r_ans: f64,
    pub mean_r_rea: f64,
    pub mean_match: f64,
    pub mean_execution: f64,
    pub mean_format: f64,
    pub mean_sl_table: f64,
    pub mean_sl_column: f64,
    pub mean_pf_table: f64,
    pub mean_pf_column: f64,
    pub mean_length: f64,
    pub surrogate: f64,
    pub kl_ans: f64,
    pub kl_rea: f64,
    pub clip_fraction_ans: f64,
    pub clip_fraction_rea: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub records: Vec<CurveRecord>,
    pub params: PolicyParams,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Ascent step on the logits.
fn apply(params: &mut PolicyParams, grad: &GradTable, cfg: &TrainConfig, adam: &mut Adam) -> Result<()> {
    match cfg.optimizer.kind {
        OptimizerKind::Sgd => params.apply_update(grad, cfg.learning_rate),
        OptimizerKind::Adam => {
            let o = &cfg.optimizer;
            adam.t += 1;
            let c1 = 1.0 - o.beta1.powi(adam.t);
            let c2 = 1.0 - o.beta2.powi(adam.t);
            let cols = grad.cols();
            let mut step = GradTable::zeros(grad.rows(), cols);
            for (i, &g) in grad.as_slice().iter().enumerate() {
                adam.m[i] = o.beta1 * adam.m[i] + (1.0 - o.beta1) * g;
                adam.v[i] = o.beta2 * adam.v[i] + (1.0 - o.beta2) * g * g;
                let mh = adam.m[i] / c1;
                let vh = adam.v[i] / c2;
                step.row_mut(i / cols)[i % cols] = mh / (vh.sqrt() + o.eps);
            }
            params.apply_update(&step, cfg.learning_rate)
        }
    }
}

/// Scores are a pure function of the token sequence, so they are memoized
/// across steps. The cache is dropped wholesale when it grows past a bound.
struct ScoreCache {
    map: HashMap<Vec<TokenId>, ScoredTokens>,
}

const CACHE_LIMIT: usize = 1 << 18;

impl ScoreCache {
    fn fill(&mut self, task: &ToyTask, cfg: &TrainConfig, groups: &[Vec<CompletionRecord>]) -> Result<()> {
        if self.map.len() > CACHE_LIMIT {
            self.map.clear();
        }
        let mut missing: Vec<&Vec<TokenId>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for m in groups.iter().flatten() {
            if !self.map.contains_key(&m.tokens) && seen.insert(&m.tokens) {
                missing.push(&m.tokens);
            }
        }
        let scored: Vec<ScoredTokens> =
            missing.par_iter().map(|t| task.score(t, &cfg.reward)).collect::<Result<_>>()?;
        for (t, s) in missing.into_iter().zip(scored) {
            self.map.insert(t.clone(), s);
        }
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn reward_means(step: usize, updates: usize, rewards: &[&RewardBreakdown], lengths: &[usize]) -> CurveRecord {
    let m = |f: fn(&RewardBreakdown) -> f64| mean(rewards.iter().map(|r| f(r)));
    CurveRecord {
        step,
        optimizer_updates: updates,
        mean_total_reward: m(|r| r.r_total),
        mean_r_ans: m(|r| r.r_ans),
        mean_r_rea: m(|r| r.r_rea),
        mean_match: m(|r| r.match_),
        mean_execution: m(|r| r.execution),
        mean_format: m(|r| r.format),
        mean_sl_table: m(|r| r.sl_table),
        mean_sl_column: m(|r| r.sl_column),
        mean_pf_table: m(|r| r.pf_table),
        mean_pf_column: m(|r| r.pf_column),
        mean_length: mean(lengths.iter().map(|&l| l as f64)),
        surrogate: 0.0,
        kl_ans: 0.0,
        kl_rea: 0.0,
        clip_fraction_ans: 0.0,
        clip_fraction_rea: 0.0,
    }
}

/// Runs the loop from the task's starting policy.
pub fn train(cfg: &TrainConfig, task_cfg: &TaskConfig, task: &ToyTask) -> Result<TrainRun> {
    let init = task.initial_policy(task_cfg.policy_mode, task_cfg.warm_start_bias)?;
    train_from(cfg, task, init)
}

/// Runs the loop from `params`. The reference policy for KL is `params` as given.
///
/// Each step: snapshot the behavior policy, sample `batch_groups` groups of
/// `group_size`, score and segment every completion, compute advantages,
/// then apply `minibatches` ascent updates over disjoint slices of the groups.
pub fn train_from(cfg: &TrainConfig, task: &ToyTask, mut params: PolicyParams) -> Result<TrainRun> {
    cfg.validate()?;
    if params.vocab() != task.vocab_size() || params.horizon() != task.horizon {
        return Err(Error::Config("policy shape does not match the task".into()));
    }
    let reference = params.clone();
    let mut adam = Adam { m: vec![0.0; params.logits().len()], v: vec![0.0; params.logits().len()], t: 0 };
    let mut cache = ScoreCache { map: HashMap::new() };
    let mut records = Vec::with_capacity(cfg.steps);
    let mut updates = 0;
    let b = cfg.batch_groups;

    for step in 0..cfg.steps {
        let old = params.clone();
        let groups: Vec<Vec<CompletionRecord>> = (0..b)
            .into_par_iter()
            .map(|g| sample_group_with(&old, (step * b + g) as u64, cfg.group_size, cfg.seed, &cfg.sampler))
            .collect::<Result<_>>()?;
        cache.fill(task, cfg, &groups)?;

        let mut batches = Vec::with_capacity(b);
        for (g, mut members) in groups.into_iter().enumerate() {
            let mut rewards = Vec::with_capacity(members.len());
            for m in &mut members {
                let s = &cache.map[&m.tokens];
                m.span = s.span.clone();
                m.logp_ref = Some(reference.logprob(&m.tokens)?);
                rewards.push(s.breakdown.clone());
            }
            batches.push(GroupBatch::from_rewards((step * b + g) as u64, members, rewards, cfg.normalize_advantages)?);
        }

        let mut rec = {
            let rewards: Vec<&RewardBreakdown> = batches.iter().flat_map(|x| &x.rewards).collect();
            let lengths: Vec<usize> = batches.iter().flat_map(|x| x.members.iter().map(|m| m.len())).collect();
            reward_means(step, updates, &rewards, &lengths)
        };

        let chunk = b.div_ceil(cfg.minibatches);
        let mut reports: Vec<ObjectiveReport> = Vec::with_capacity(b);
        for (mb, slice) in batches.chunks_mut(chunk).enumerate() {
            if mb > 0 {
                let current = &params;
                slice
                    .par_iter_mut()
                    .try_for_each(|batch| batch.members.iter_mut().try_for_each(|m| m.refresh_new(current)))?;
            }
            let current = &params;
            let mb_reports: Vec<ObjectiveReport> =
                slice.par_iter().map(|batch| evaluate(batch, &cfg.objective)).collect::<Result<_>>()?;
            let mut grad = GradTable::zeros_like(&params);
            let scale = 1.0 / slice.len() as f64;
            for (batch, r) in slice.iter().zip(&mb_reports) {
                r.accumulate_param_grad(batch, current, scale, &mut grad)?;
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("step {step}: gradient of the {} objective", cfg.algo())));
            }
            apply(&mut params, &grad, cfg, &mut adam).map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
            updates += 1;
            reports.extend(mb_reports);
        }

        rec.optimizer_updates = updates;
        rec.surrogate = mean(reports.iter().map(|r| r.surrogate));
        rec.kl_ans = mean(reports.iter().map(|r| r.kl_ans));
        rec.kl_rea = mean(reports.iter().map(|r| r.kl_rea));
        rec.clip_fraction_ans = mean(reports.iter().map(|r| r.clip_fraction_ans));
        rec.clip_fraction_rea = mean(reports.iter().map(|r| r.clip_fraction_rea));
        if !rec.surrogate.is_finite() {
            return Err(Error::NonFinite(format!("step {step}: surrogate {}", rec.surrogate)));
        }
        records.push(rec);
    }
    Ok(TrainRun { records, params })
}

/// Writes curve records as CSV with a header row.
pub fn write_curve_csv<W: std::io::Write>(records: &[CurveRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: std::io::Read>(r: R) -> Result<Vec<CurveRecord>> {
    csv::Reader::from_reader(r).deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Provenance of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub algo: String,
    pub train_seed: u64,
    pub task_seed: u64,
    pub steps: usize,
    pub group_size: usize,
    pub batch_groups: usize,
    pub optimizer_updates: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::RunConfig;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 4;
        cfg.train.batch_groups = 2;
        cfg.train.group_size = 4;
        cfg
    }

    #[test]
    fn zero_learning_rate_keeps_policy() {
        let mut cfg = small();
        cfg.train.learning_rate = 0.0;
        let task = cfg.task.build().unwrap();
        let run = train(&cfg.train, &cfg.task, &task).unwrap();
        let init = task.initial_policy(cfg.task.policy_mode, cfg.task.warm_start_bias).unwrap();
        assert_eq!(run.params, init);
        assert_eq!(run.records.len(), 4);
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        let task = cfg.task.build().unwrap();
        let a = train(&cfg.train, &cfg.task, &task).unwrap();
        let b = train(&cfg.train, &cfg.task, &task).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn minibatches_count_updates() {
        let mut cfg = small();
        cfg.train.minibatches = 2;
        let task = cfg.task.build().unwrap();
        let run = train(&cfg.train, &cfg.task, &task).unwrap();
        assert_eq!(run.records.last().unwrap().optimizer_updates, 8);
    }

    #[test]
    fn adam_runs() {
        let mut cfg = small();
        cfg.train.optimizer.kind = OptimizerKind::Adam;
        cfg.train.learning_rate = 0.05;
        let task = cfg.task.build().unwrap();
        assert!(train(&cfg.train, &cfg.task, &task).is_ok());
    }

    #[test]
    fn csv_roundtrip() {
        let cfg = small();
        let task = cfg.task.build().unwrap();
        let run = train(&cfg.train, &cfg.task, &task).unwrap();
        let mut buf = Vec::new();
        write_curve_csv(&run.records, &mut buf).unwrap();
        assert_eq!(read_curve_csv(&buf[..]).unwrap(), run.records);
    }
}
