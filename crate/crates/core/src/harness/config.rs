//! Run configuration, read from and written to TOML.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objective::{Algo, ObjectiveConfig};
use crate::policy::{PolicyMode, SamplerConfig};
use crate::reward::WeightProfile;
use crate::segment::Grammar;

use super::task::{make_task, ToyTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub seed: u64,
    pub k_tables: usize,
    pub answer_len: usize,
    pub horizon: usize,
    pub grammar: Grammar,
    pub policy_mode: PolicyMode,
    /// Logit given to template-conforming tokens in the starting policy; 0 is uniform.
    pub warm_start_bias: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k_tables: 4,
            answer_len: 3,
            horizon: 24,
            grammar: Grammar::PlanSql,
            policy_mode: PolicyMode::Positionwise,
            warm_start_bias: 4.0,
        }
    }
}

impl TaskConfig {
    pub fn build(&self) -> Result<ToyTask> {
        make_task(self.seed, self.k_tables, self.answer_len, self.horizon, self.grammar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Sgd, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Training loop settings. The algorithm is `objective.algo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_groups: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Optimizer updates per rollout batch; groups are split evenly. Updates
    /// after the first see ratios away from 1.
    pub minibatches: usize,
    pub normalize_advantages: bool,
    pub optimizer: OptimizerConfig,
    pub objective: ObjectiveConfig,
    pub sampler: SamplerConfig,
    pub reward: WeightProfile,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            batch_groups: 32,
            learning_rate: 4.0,
            steps: 500,
            seed: 1,
            minibatches: 1,
            normalize_advantages: true,
            optimizer: OptimizerConfig::default(),
            objective: ObjectiveConfig::default(),
            sampler: SamplerConfig::default(),
            reward: WeightProfile::thinkquel(),
        }
    }
}

impl TrainConfig {
    pub fn algo(&self) -> Algo {
        self.objective.algo
    }

    /// Rollout settings for Spider-scale runs: G = 10, lr 1e-6, batch 64,
    /// temperature 1.0, spider reward profile. Meant for LLM-scale policies; a
    /// tabular policy barely moves at this learning rate.
    pub fn spider_preset() -> Self {
        Self {
            group_size: 10,
            batch_groups: 64,
            learning_rate: 1e-6,
            sampler: SamplerConfig { temperature: 1.0, top_p: 1.0 },
            reward: WeightProfile::spider(),
            ..Self::default()
        }
    }

    /// Thinkquel settings: G = 16, lr 5e-6, batch 32, temperature 1.0, top-p 0.95.
    pub fn thinkquel_preset() -> Self {
        Self {
            group_size: 16,
            batch_groups: 32,
            learning_rate: 5e-6,
            sampler: SamplerConfig { temperature: 1.0, top_p: 0.95 },
            reward: WeightProfile::thinkquel(),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::default()),
            "spider" => Ok(Self::spider_preset()),
            "thinkquel" => Ok(Self::thinkquel_preset()),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected toy, spider or thinkquel)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size must be at least 2, got {}", self.group_size)));
        }
        if self.batch_groups == 0 {
            return Err(Error::Config("batch_groups must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.minibatches == 0 || self.minibatches > self.batch_groups {
            return Err(Error::Config(format!(
                "minibatches must be in 1..={}, got {}",
                self.batch_groups, self.minibatches
            )));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps.is_nan() || o.eps <= 0.0 {
            return Err(Error::Config("adam betas must be in [0, 1) and eps positive".into()));
        }
        self.objective.validate()?;
        self.sampler.validate()?;
        self.reward.validate()
    }
}

/// Everything a `train` or `compare` run reads.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub compare: CompareConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub algos: Vec<Algo>,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    /// Trailing window for the steps-to-threshold statistic.
    pub window: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { algos: Algo::ALL.to_vec(), seeds: vec![1, 2, 3], threshold: 0.8, window: 10 }
    }
}

impl RunConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.task.build()?;
        if !(self.compare.threshold.is_finite()) || self.compare.window == 0 {
            return Err(Error::Config("compare threshold must be finite and window positive".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.hash(), RunConfig::from_toml(&text).unwrap().hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 3\n[train.objective]\nalgo = \"gspo\"\n").unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.algo(), Algo::Gspo);
        assert_eq!(cfg.task, TaskConfig::default());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml("[train]\ngroup_size = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[task]\nhorizon = 5\n").is_err());
        assert!(RunConfig::from_toml(
            "[train.reward]\nmode = \"spider\"\nans_scale = 1.0\nrea_scale = 1.0\n[train.reward.weights]\n"
        )
        .is_err());
    }

    #[test]
    fn presets() {
        let s = TrainConfig::spider_preset();
        assert_eq!((s.group_size, s.batch_groups, s.learning_rate), (10, 64, 1e-6));
        let t = TrainConfig::thinkquel_preset();
        assert_eq!((t.group_size, t.batch_groups, t.learning_rate, t.sampler.top_p), (16, 32, 5e-6, 0.95));
        assert!(TrainConfig::preset("bird").is_err());
    }
}
