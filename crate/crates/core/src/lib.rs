//! Group-relative policy optimization kernels and a plan + SQL reward stack.
//!
//! * [`policy`]: tabular autoregressive policy with exact log-probabilities.
//! * [`advantage`]: group-relative advantages per reward channel.
//! * [`objective`]: GRPO, GSPO and TS-GRPO surrogates with exact gradients.
//! * [`segment`]: plan/answer span segmentation of raw completions.
//! * [`sqlref`]: table and column reference extraction from SQL and dbt models.
//! * [`reward`]: itemized rewards, weight profiles and execution backends.
//! * [`harness`]: synthetic plan-then-answer task and training loop.
//! * [`gradcheck`]: finite-difference verification of the objectives.

pub mod advantage;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod objective;
pub mod policy;
pub mod reward;
pub mod segment;
pub mod sqlref;

pub use advantage::{broadcast_by_span, group_normalize, span_advantages, GroupBatch};
pub use error::{Error, Result};
pub use objective::{evaluate, grpo_loss, gspo_loss, tsgrpo_loss, Algo, ObjectiveConfig, ObjectiveReport};
pub use policy::{CompletionRecord, PolicyMode, PolicyParams, SamplerConfig, TokenId};
pub use reward::{RewardBreakdown, WeightProfile};
pub use segment::{Grammar, SpanMask};
