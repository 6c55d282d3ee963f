//! Group-relative advantages per reward channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CompletionRecord;
use crate::reward::RewardBreakdown;
use crate::segment::SpanMask;

/// Added to the population std before dividing.
pub const EPS_STD: f64 = 1e-6;
/// Below this std a group is treated as uninformative and gets zero advantages.
pub const DEGENERATE_STD: f64 = 1e-12;

/// `(r_i - mean) / (std_pop + EPS_STD)`, or all zeros for a constant group.
pub fn group_normalize(rewards: &[f64]) -> Result<Vec<f64>> {
    group_advantages(rewards, true)
}

/// Group-centered rewards, optionally divided by the population std.
pub fn group_advantages(rewards: &[f64], normalize: bool) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::Config(format!("group normalization needs at least 2 rewards, got {g}")));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Input(format!("non-finite reward {r}")));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; g]);
    }
    let denom = if normalize { std + EPS_STD } else { 1.0 };
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Per-token advantages: `adv_ans` on answer tokens, `adv_rea` on reasoning tokens.
pub fn broadcast_by_span(adv_ans: f64, adv_rea: f64, span: &SpanMask, len: usize) -> Result<Vec<f64>> {
    let flags = span.answer_flags(len)?;
    Ok(flags.into_iter().map(|a| if a { adv_ans } else { adv_rea }).collect())
}

/// G completions of one prompt with their rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt_id: u64,
    pub members: Vec<CompletionRecord>,
    /// Empty when the advantages were supplied directly.
    pub rewards: Vec<RewardBreakdown>,
    pub adv_ans: Vec<f64>,
    pub adv_rea: Vec<f64>,
    pub adv_total: Vec<f64>,
}

impl GroupBatch {
    /// Scores a group: span advantages from `r_ans`/`r_rea` and the
    /// single-channel advantage from `r_total`.
    pub fn from_rewards(
        prompt_id: u64,
        members: Vec<CompletionRecord>,
        rewards: Vec<RewardBreakdown>,
        normalize: bool,
    ) -> Result<Self> {
        let mut batch =
            Self { prompt_id, members, rewards, adv_ans: Vec::new(), adv_rea: Vec::new(), adv_total: Vec::new() };
        let (ans, rea) = span_advantages_with(&batch, normalize)?;
        let total: Vec<f64> = batch.rewards.iter().map(|r| r.r_total).collect();
        batch.adv_total = group_advantages(&total, normalize)?;
        batch.adv_ans = ans;
        batch.adv_rea = rea;
        batch.validate()?;
        Ok(batch)
    }

    /// A group with advantages given directly (tests, FFI, external rollouts).
    pub fn from_advantages(
        prompt_id: u64,
        members: Vec<CompletionRecord>,
        adv_ans: Vec<f64>,
        adv_rea: Vec<f64>,
        adv_total: Vec<f64>,
    ) -> Result<Self> {
        let batch = Self { prompt_id, members, rewards: Vec::new(), adv_ans, adv_rea, adv_total };
        batch.validate()?;
        Ok(batch)
    }

    pub fn group_size(&self) -> usize {
        self.members.len()
    }

    /// Shape and finiteness checks shared by all objectives.
    pub fn validate(&self) -> Result<()> {
        let g = self.members.len();
        if g < 2 {
            return Err(Error::Config(format!("group size must be at least 2, got {g}")));
        }
        for (name, v) in [("adv_ans", &self.adv_ans), ("adv_rea", &self.adv_rea), ("adv_total", &self.adv_total)] {
            if v.len() != g {
                return Err(Error::Input(format!("{name} has {} entries for {g} members", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("{name} contains a non-finite value")));
            }
        }
        if !self.rewards.is_empty() && self.rewards.len() != g {
            return Err(Error::Input(format!("{} rewards for {g} members", self.rewards.len())));
        }
        for m in &self.members {
            m.validate()?;
        }
        Ok(())
    }
}

/// `(normalize(r_ans), normalize(r_rea))` over the group's rewards.
pub fn span_advantages(batch: &GroupBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    span_advantages_with(batch, true)
}

pub fn span_advantages_with(batch: &GroupBatch, normalize: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = batch.members.len();
    if batch.rewards.len() != g {
        return Err(Error::Input(format!(
            "span rewards missing: {} reward records for {g} members",
            batch.rewards.len()
        )));
    }
    let ans: Vec<f64> = batch.rewards.iter().map(|r| r.r_ans).collect();
    let rea: Vec<f64> = batch.rewards.iter().map(|r| r.r_rea).collect();
    if ans.iter().chain(&rea).any(|x| !x.is_finite()) {
        return Err(Error::Input("span reward is missing or non-finite".into()));
    }
    Ok((group_advantages(&ans, normalize)?, group_advantages(&rea, normalize)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::LayoutTag;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(group_normalize(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0; 3]);
        assert!(close(&group_normalize(&[1.0, 0.0]).unwrap(), &[1.0, -1.0], 1e-5));
        let x = group_normalize(&[2.0, 0.0, 1.0]).unwrap();
        assert!(close(&x, &[1.224744871391589, -1.224744871391589, 0.0], 1e-5));
        assert_eq!(x[2], 0.0);
    }

    #[test]
    fn group_of_one_rejected() {
        assert!(matches!(group_normalize(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn unnormalized_is_centered() {
        let x = group_advantages(&[3.0, 1.0], false).unwrap();
        assert_eq!(x, vec![1.0, -1.0]);
    }

    #[test]
    fn broadcast_examples() {
        let span = SpanMask::from_indices(vec![2, 3, 4], vec![0, 1], LayoutTag::PlanSql).unwrap();
        assert_eq!(broadcast_by_span(2.0, -1.0, &span, 5).unwrap(), vec![-1.0, -1.0, 2.0, 2.0, 2.0]);
        let all_ans = SpanMask::all_answer(3, LayoutTag::PlanSql);
        assert_eq!(broadcast_by_span(0.5, 9.0, &all_ans, 3).unwrap(), vec![0.5; 3]);
        let bad = SpanMask::from_answer_flags(&[true, false], LayoutTag::PlanSql);
        assert!(matches!(broadcast_by_span(1.0, 1.0, &bad, 3), Err(Error::Invariant(_))));
    }
}
