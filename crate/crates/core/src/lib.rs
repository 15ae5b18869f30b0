//! A desk-scale laboratory for score-conditioned self-rewarding preference
//! optimization.
//!
//! The lab implements the full pipeline end to end on exactly enumerable
//! tabular policies: preference pairs are generated by conditioning a frozen
//! reference policy on verbalized quality scores ("a perfect score of 10 out
//! of 10" vs a lower rejected score), the policy trains on those pairs with
//! a DPO-style loss, and the rejected score rises across iterations so later
//! rounds see harder negatives. Because the response space is finite, the
//! supporting theory — the closed-form KL-regularized optimum, the quality
//! gap between conditioning scores, gradient correctness — is checked
//! exactly rather than approximately.
//!
//! A pluggable generation backend runs the identical data pipeline against a
//! hosted chat-completions endpoint for real-model dataset production.

pub mod analysis;
pub mod datagen;
pub mod fixture;
pub mod losses;
pub mod oracle;
pub mod policy;
pub mod seeds;
pub mod trainer;
pub mod types;

pub use oracle::RewardOracle;
pub use policy::{ConditionalPolicy, TabularPolicy};
pub use trainer::{TrainConfig, TrainerInputs};
pub use types::{PreferencePair, Prompt, PromptId, PromptSet, ResponseSpace, ScoreSchedule};
