//! Scoring real completions against gold bundles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exec::{execution_reward, score_match, ExecStatus, ExecutionBackend, ExecutionResult};
use super::{breakdown, score_structure, Channels, RewardBreakdown, WeightProfile};
use crate::error::{Error, Result};
use crate::segment::Grammar;
use crate::sqlref::{self, RefSet};

/// Gold record for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldRecord {
    pub question_id: String,
    pub gold_sql: String,
    #[serde(default)]
    pub gold_tables: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_result: Option<ExecutionResult>,
}

/// One completion to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionInput {
    pub question_id: String,
    pub text: String,
}

/// What to do when the backend itself fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportPolicy {
    /// Retry up to this many extra times, then fail the run.
    Retry(u32),
    /// Drop the sample from the batch.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub profile: WeightProfile,
    pub grammar: Grammar,
    pub timeout_ms: u64,
    pub on_transport_failure: TransportPolicy,
    /// Take the gold source sets from `extract_refs(gold_sql)` instead of the
    /// bundle's `gold_tables`/`gold_columns`.
    pub derive_gold_from_sql: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            profile: WeightProfile::thinkquel(),
            grammar: Grammar::PlanSql,
            timeout_ms: 30_000,
            on_transport_failure: TransportPolicy::Retry(2),
            derive_gold_from_sql: false,
        }
    }
}

/// Scored completion, or an excluded one when the backend was unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<RewardBreakdown>,
    pub excluded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec_status: Option<ExecStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Scores completions with a shared backend. Independent completions are
/// scored in parallel; backend calls are serialized by the backend itself.
pub struct Scorer<'a, B: ExecutionBackend + ?Sized> {
    pub config: ScoreConfig,
    backend: &'a B,
}

enum Outcome<T> {
    Done(T),
    Excluded(String),
}

impl<'a, B: ExecutionBackend + ?Sized> Scorer<'a, B> {
    pub fn new(config: ScoreConfig, backend: &'a B) -> Result<Self> {
        config.profile.validate()?;
        Ok(Self { config, backend })
    }

    fn run(&self, sql: &str) -> Result<Outcome<(f64, ExecutionResult)>> {
        let attempts = match self.config.on_transport_failure {
            TransportPolicy::Retry(n) => n + 1,
            TransportPolicy::Exclude => 1,
        };
        let mut last = None;
        for _ in 0..attempts {
            match execution_reward(sql, self.backend, self.config.timeout_ms) {
                Ok(r) => return Ok(Outcome::Done(r)),
                Err(e @ Error::Transport(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        let err = last.expect("at least one attempt");
        match self.config.on_transport_failure {
            TransportPolicy::Exclude => Ok(Outcome::Excluded(err.to_string())),
            TransportPolicy::Retry(_) => Err(err),
        }
    }

    fn gold_refs(&self, gold: &GoldRecord) -> (RefSet, bool) {
        if self.config.derive_gold_from_sql {
            return (sqlref::extract_refs(&gold.gold_sql), true);
        }
        let cols = gold.gold_columns.clone().unwrap_or_default();
        (RefSet::from_raw(&gold.gold_tables, cols), gold.gold_columns.is_some())
    }

    /// Scores one completion text against its gold record.
    pub fn score(&self, question_id: &str, text: &str, gold: &GoldRecord) -> Result<ScoredRecord> {
        let (gold_refs, have_columns) = self.gold_refs(gold);
        let s = score_structure(text, self.config.grammar, &gold_refs);
        let mut channels = Channels {
            format: Some(s.format),
            sl_table: Some(s.sl_table),
            sl_column: have_columns.then_some(s.sl_column),
            pf_table: Some(s.pf_table),
            pf_column: Some(s.pf_column),
            execution: Some(0.0),
            match_: Some(0.0),
        };
        let excluded = |note: String| ScoredRecord {
            question_id: question_id.to_string(),
            breakdown: None,
            excluded: true,
            exec_status: None,
            note: Some(note),
        };
        let mut status = None;
        if !s.answer_sql.is_empty() {
            let (exec, pred) = match self.run(&s.answer_sql)? {
                Outcome::Done(r) => r,
                Outcome::Excluded(note) => return Ok(excluded(note)),
            };
            status = Some(pred.status);
            channels.execution = Some(exec);
            if pred.is_ok() {
                let gold_result = match &gold.gold_result {
                    Some(r) => r.clone(),
                    None => match self.run(&gold.gold_sql)? {
                        Outcome::Done((_, r)) => r,
                        Outcome::Excluded(note) => return Ok(excluded(note)),
                    },
                };
                channels.match_ = Some(score_match(&s.answer_sql, &pred, &gold_result));
            }
        }
        Ok(ScoredRecord {
            question_id: question_id.to_string(),
            breakdown: Some(breakdown(&channels, &self.config.profile)),
            excluded: false,
            exec_status: status,
            note: None,
        })
    }

    /// Scores many completions, keeping input order. Each completion is
    /// matched to its gold record by `question_id`.
    pub fn score_all(&self, inputs: &[CompletionInput], golds: &[GoldRecord]) -> Result<Vec<ScoredRecord>>
    where
        B: Sync,
    {
        let index: std::collections::HashMap<&str, &GoldRecord> =
            golds.iter().map(|g| (g.question_id.as_str(), g)).collect();
        inputs
            .par_iter()
            .map(|c| {
                let gold = index
                    .get(c.question_id.as_str())
                    .ok_or_else(|| Error::Input(format!("no gold record for question '{}'", c.question_id)))?;
                self.score(&c.question_id, &c.text, gold)
            })
            .collect()
    }
}

/// One-shot convenience around [`Scorer::score`].
pub fn score_completion_text<B: ExecutionBackend + ?Sized>(
    text: &str,
    gold: &GoldRecord,
    config: &ScoreConfig,
    backend: &B,
) -> Result<ScoredRecord> {
    Scorer::new(config.clone(), backend)?.score(&gold.question_id, text, gold)
}
