//! Itemized rewards for plan + SQL completions and their span aggregation.
//!
//! Seven channels are scored per completion. Answer-span channels
//! (execution, match, plan following) feed `r_ans`; reasoning-span channels
//! (format, schema linking) feed `r_rea`; `r_total = r_ans + r_rea`.

mod exec;
mod scorer;
pub mod wire;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{self, Grammar};
use crate::sqlref::{self, final_segment, RefSet};

pub use exec::{
    cells_equal, execution_reward, match_reward, normalized_sql_hash, score_match, Cell, ExecStatus, ExecutionBackend,
    ExecutionResult, FixtureBackend, FixtureEntry, NUMERIC_TOLERANCE,
};
pub use scorer::{
    score_completion_text, CompletionInput, GoldRecord, ScoreConfig, ScoredRecord, Scorer, TransportPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Format,
    SlTable,
    SlColumn,
    PfTable,
    PfColumn,
    Execution,
    Match,
}

impl Channel {
    pub const ALL: [Channel; 7] = [
        Channel::Format,
        Channel::SlTable,
        Channel::SlColumn,
        Channel::PfTable,
        Channel::PfColumn,
        Channel::Execution,
        Channel::Match,
    ];

    /// Whether the channel is credited to the answer span.
    pub fn is_answer(self) -> bool {
        matches!(self, Channel::Execution | Channel::Match | Channel::PfTable | Channel::PfColumn)
    }
}

/// Raw channel values before aggregation. `None` means the channel was not scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Channels {
    pub format: Option<f64>,
    pub sl_table: Option<f64>,
    pub sl_column: Option<f64>,
    pub pf_table: Option<f64>,
    pub pf_column: Option<f64>,
    pub execution: Option<f64>,
    #[serde(rename = "match")]
    pub match_: Option<f64>,
}

impl Channels {
    pub fn get(&self, c: Channel) -> Option<f64> {
        match c {
            Channel::Format => self.format,
            Channel::SlTable => self.sl_table,
            Channel::SlColumn => self.sl_column,
            Channel::PfTable => self.pf_table,
            Channel::PfColumn => self.pf_column,
            Channel::Execution => self.execution,
            Channel::Match => self.match_,
        }
    }

    pub fn all(value: f64) -> Self {
        Self {
            format: Some(value),
            sl_table: Some(value),
            sl_column: Some(value),
            pf_table: Some(value),
            pf_column: Some(value),
            execution: Some(value),
            match_: Some(value),
        }
    }
}

/// Per-channel weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelWeights {
    pub format: f64,
    pub sl_table: f64,
    pub sl_column: f64,
    pub pf_table: f64,
    pub pf_column: f64,
    pub execution: f64,
    #[serde(rename = "match")]
    pub match_: f64,
}

impl ChannelWeights {
    pub fn get(&self, c: Channel) -> f64 {
        match c {
            Channel::Format => self.format,
            Channel::SlTable => self.sl_table,
            Channel::SlColumn => self.sl_column,
            Channel::PfTable => self.pf_table,
            Channel::PfColumn => self.pf_column,
            Channel::Execution => self.execution,
            Channel::Match => self.match_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    Spider,
    Thinkquel,
    Custom,
}

/// Channel weights plus a scale on each span sum:
/// `r_ans = ans_scale * sum(w_c * c, answer channels)`, likewise for `r_rea`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightProfile {
    pub mode: ProfileMode,
    pub ans_scale: f64,
    pub rea_scale: f64,
    pub weights: ChannelWeights,
}

impl WeightProfile {
    /// `R = 0.4 (0.2 format + 0.8 table linking) + 0.6 match`.
    pub fn spider() -> Self {
        Self {
            mode: ProfileMode::Spider,
            ans_scale: 0.6,
            rea_scale: 0.4,
            weights: ChannelWeights { format: 0.2, sl_table: 0.8, match_: 1.0, ..Default::default() },
        }
    }

    /// Flat weights summing to 1.
    pub fn thinkquel() -> Self {
        Self {
            mode: ProfileMode::Thinkquel,
            ans_scale: 1.0,
            rea_scale: 1.0,
            weights: ChannelWeights {
                execution: 0.2,
                match_: 0.5,
                format: 0.1,
                sl_table: 0.07,
                sl_column: 0.05,
                pf_table: 0.05,
                pf_column: 0.03,
            },
        }
    }

    pub fn custom(ans_scale: f64, rea_scale: f64, weights: ChannelWeights) -> Result<Self> {
        let p = Self { mode: ProfileMode::Custom, ans_scale, rea_scale, weights };
        p.validate()?;
        Ok(p)
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "spider" => Ok(Self::spider()),
            "thinkquel" => Ok(Self::thinkquel()),
            other => Err(Error::Config(format!("unknown weight profile '{other}' (expected spider or thinkquel)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = Channel::ALL.map(|c| self.weights.get(c));
        if all.iter().chain([&self.ans_scale, &self.rea_scale]).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("reward weights must be finite and non-negative".into()));
        }
        let expected = match self.mode {
            ProfileMode::Spider => Some(Self::spider()),
            ProfileMode::Thinkquel => Some(Self::thinkquel()),
            ProfileMode::Custom => None,
        };
        if let Some(expected) = expected {
            if *self != expected {
                return Err(Error::Config(format!(
                    "{:?} profile weights are fixed; use mode = \"custom\" to change them",
                    self.mode
                )));
            }
        }
        Ok(())
    }
}

impl Default for WeightProfile {
    fn default() -> Self {
        Self::thinkquel()
    }
}

/// All channels of one scored completion plus the span aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub sl_table: f64,
    pub sl_column: f64,
    pub pf_table: f64,
    pub pf_column: f64,
    pub execution: f64,
    #[serde(rename = "match")]
    pub match_: f64,
    pub r_ans: f64,
    pub r_rea: f64,
    pub r_total: f64,
    /// Channels with non-zero weight that were not scored (counted as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<Channel>,
}

impl RewardBreakdown {
    /// Breakdown with only the span rewards set; used when the caller already
    /// has channel rewards from elsewhere.
    pub fn from_spans(r_ans: f64, r_rea: f64, r_total: f64) -> Self {
        Self {
            format: 0.0,
            sl_table: 0.0,
            sl_column: 0.0,
            pf_table: 0.0,
            pf_column: 0.0,
            execution: 0.0,
            match_: 0.0,
            r_ans,
            r_rea,
            r_total,
            missing: Vec::new(),
        }
    }
}

/// Span rewards for a set of channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub r_ans: f64,
    pub r_rea: f64,
    pub r_total: f64,
    pub missing: Vec<Channel>,
}

pub fn aggregate(channels: &Channels, profile: &WeightProfile) -> Aggregate {
    let mut missing = Vec::new();
    let mut value = |c: Channel| {
        let w = profile.weights.get(c);
        match channels.get(c) {
            Some(v) => w * v,
            None => {
                if w != 0.0 {
                    missing.push(c);
                }
                0.0
            }
        }
    };
    let ans_sum =
        value(Channel::Execution) + value(Channel::Match) + value(Channel::PfTable) + value(Channel::PfColumn);
    let rea_sum = value(Channel::Format) + value(Channel::SlTable) + value(Channel::SlColumn);
    let r_ans = profile.ans_scale * ans_sum;
    let r_rea = profile.rea_scale * rea_sum;
    Aggregate { r_ans, r_rea, r_total: r_ans + r_rea, missing }
}

/// Scores channels and fills in a breakdown.
pub fn breakdown(channels: &Channels, profile: &WeightProfile) -> RewardBreakdown {
    let agg = aggregate(channels, profile);
    let v = |x: Option<f64>| x.unwrap_or(0.0);
    RewardBreakdown {
        format: v(channels.format),
        sl_table: v(channels.sl_table),
        sl_column: v(channels.sl_column),
        pf_table: v(channels.pf_table),
        pf_column: v(channels.pf_column),
        execution: v(channels.execution),
        match_: v(channels.match_),
        r_ans: agg.r_ans,
        r_rea: agg.r_rea,
        r_total: agg.r_total,
        missing: agg.missing,
    }
}

/// 1 when the plan region holds a yml block and an answer block exists.
pub fn format_reward(text: &str) -> f64 {
    if segment::has_plan_yml(text) && segment::has_answer_block(text) {
        1.0
    } else {
        0.0
    }
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets agreeing fully.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Table-level Jaccard. Full names are compared when every name on both
/// sides is qualified; otherwise both sides are reduced to final segments.
pub fn jaccard_tables(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let qualified = a.iter().chain(b).all(|t| t.contains('.'));
    if qualified {
        return jaccard(a, b);
    }
    let reduce = |s: &BTreeSet<String>| s.iter().map(|t| final_segment(t).to_string()).collect();
    jaccard(&reduce(a), &reduce(b))
}

/// `(sl_table, sl_column)`: agreement between what the plan declares and the gold sources.
pub fn schema_linking(plan_sources: &RefSet, gold_sources: &RefSet) -> (f64, f64) {
    (jaccard_tables(&plan_sources.tables, &gold_sources.tables), jaccard(&plan_sources.columns, &gold_sources.columns))
}

/// `(pf_table, pf_column)`: agreement between what the SQL uses and what the plan declared.
pub fn plan_following(predicted_sql_refs: &RefSet, plan_sources: &RefSet) -> (f64, f64) {
    (
        jaccard_tables(&predicted_sql_refs.tables, &plan_sources.tables),
        jaccard(&predicted_sql_refs.columns, &plan_sources.columns),
    )
}

/// Plan-declared sources of a completion as canonical sets.
pub fn plan_refset(text: &str) -> RefSet {
    let refs = segment::extract_plan_refs(text);
    RefSet::from_raw(refs.tables, refs.columns)
}

/// The channels that depend only on text: format, schema linking and plan
/// following. Linking is 0 without a plan yml block and plan following is 0
/// without an answer, so an absent block never earns vacuous credit.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralScore {
    pub format: f64,
    pub sl_table: f64,
    pub sl_column: f64,
    pub pf_table: f64,
    pub pf_column: f64,
    pub answer_sql: String,
    pub plan: RefSet,
    pub predicted: RefSet,
}

pub fn score_structure(text: &str, grammar: Grammar, gold: &RefSet) -> StructuralScore {
    let format = format_reward(text);
    let has_plan = segment::has_plan_yml(text);
    let plan = plan_refset(text);
    let answer_sql = segment::extract_answer_sql(text, grammar);
    let predicted = sqlref::extract_refs(&answer_sql);
    let (sl_table, sl_column) = if has_plan { schema_linking(&plan, gold) } else { (0.0, 0.0) };
    let (pf_table, pf_column) = if answer_sql.is_empty() { (0.0, 0.0) } else { plan_following(&predicted, &plan) };
    StructuralScore { format, sl_table, sl_column, pf_table, pf_column, answer_sql, plan, predicted }
}
