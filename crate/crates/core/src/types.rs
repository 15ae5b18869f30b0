//! Shared domain vocabulary: prompts, response spaces, preference pairs,
//! score schedules, and run provenance.
//!
//! Everything here is an immutable value object; construction validates the
//! invariants and the types are safe to share read-only across threads.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The fixed prefix score used for chosen responses ("10 out of 10").
pub const CHOSEN_SCORE: u8 = 10;

/// Default cap on the number of enumerable responses.
pub const DEFAULT_RESPONSE_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("prompt `{0}` has empty text")]
    EmptyPromptText(String),
    #[error("duplicate prompt id `{0}`")]
    DuplicatePromptId(String),
    #[error("response space is empty")]
    EmptyResponseSpace,
    #[error("duplicate response at index {0}")]
    DuplicateResponse(usize),
    #[error("response space has {got} entries, cap is {cap}")]
    ResponseSpaceTooLarge { got: usize, cap: usize },
    #[error("chosen score {chosen} must exceed rejected score {rejected}")]
    ScoreOrder { chosen: u8, rejected: u8 },
    #[error("prefix score {0} outside 1..=10")]
    PrefixScoreOutOfRange(u8),
    #[error("iteration must be >= 1")]
    IterationZero,
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Schedule validation failures, mirrored by `validate_schedule`.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("schedule has {got} entries but the run has {expected} iterations")]
    LengthMismatch { expected: usize, got: usize },
    #[error("schedule is not monotonically non-decreasing at position {position}")]
    NonMonotone { position: usize },
    #[error("rejected score {score} at position {position} outside 1..=9")]
    ScoreOutOfRange { position: usize, score: u8 },
}

/// Opaque identifier for a prompt, unique within a [`PromptSet`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(String);

impl PromptId {
    pub fn new(id: impl Into<String>) -> Self {
        PromptId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PromptId {
    fn from(s: &str) -> Self {
        PromptId(s.to_string())
    }
}

/// A single-turn instruction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: PromptId,
    pub text: String,
}

impl Prompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Prompt {
            id: PromptId::new(id),
            text: text.into(),
        }
    }
}

/// An ordered collection of prompts with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
    index: HashMap<PromptId, usize>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self, TypeError> {
        let mut index = HashMap::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            if p.text.is_empty() {
                return Err(TypeError::EmptyPromptText(p.id.to_string()));
            }
            if index.insert(p.id.clone(), i).is_some() {
                return Err(TypeError::DuplicatePromptId(p.id.to_string()));
            }
        }
        Ok(PromptSet { prompts, index })
    }

    pub fn load(path: &Path) -> Result<Self, TypeError> {
        let raw = std::fs::read_to_string(path).map_err(|source| TypeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let prompts: Vec<Prompt> =
            serde_json::from_str(&raw).map_err(|source| TypeError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        PromptSet::new(prompts)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.iter()
    }

    pub fn get(&self, id: &PromptId) -> Option<&Prompt> {
        self.index.get(id).map(|&i| &self.prompts[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &PromptId> {
        self.prompts.iter().map(|p| &p.id)
    }
}

/// The finite response space 𝒴, shared by every prompt in a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseSpace {
    responses: Vec<String>,
    index: HashMap<String, usize>,
}

impl ResponseSpace {
    pub fn new(responses: Vec<String>) -> Result<Self, TypeError> {
        Self::with_cap(responses, DEFAULT_RESPONSE_CAP)
    }

    pub fn with_cap(responses: Vec<String>, cap: usize) -> Result<Self, TypeError> {
        if responses.is_empty() {
            return Err(TypeError::EmptyResponseSpace);
        }
        if responses.len() > cap {
            return Err(TypeError::ResponseSpaceTooLarge {
                got: responses.len(),
                cap,
            });
        }
        let mut index = HashMap::with_capacity(responses.len());
        for (i, r) in responses.iter().enumerate() {
            if index.insert(r.clone(), i).is_some() {
                return Err(TypeError::DuplicateResponse(i));
            }
        }
        Ok(ResponseSpace { responses, index })
    }

    pub fn load(path: &Path) -> Result<Self, TypeError> {
        let raw = std::fs::read_to_string(path).map_err(|source| TypeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let responses: Vec<String> =
            serde_json::from_str(&raw).map_err(|source| TypeError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        ResponseSpace::new(responses)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.responses.get(index).map(|s| s.as_str())
    }

    pub fn index_of(&self, response: &str) -> Option<usize> {
        self.index.get(response).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.responses.iter().map(|s| s.as_str())
    }
}

/// One preference example. The serialized field order is the on-disk JSONL
/// schema and must not be reordered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: PromptId,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_score: u8,
    pub rejected_score: u8,
    pub iteration: usize,
}

impl PreferencePair {
    pub fn new(
        prompt_id: PromptId,
        prompt: String,
        chosen: String,
        rejected: String,
        chosen_score: u8,
        rejected_score: u8,
        iteration: usize,
    ) -> Result<Self, TypeError> {
        let pair = PreferencePair {
            prompt_id,
            prompt,
            chosen,
            rejected,
            chosen_score,
            rejected_score,
            iteration,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if !(1..=10).contains(&self.chosen_score) {
            return Err(TypeError::PrefixScoreOutOfRange(self.chosen_score));
        }
        if !(1..=10).contains(&self.rejected_score) {
            return Err(TypeError::PrefixScoreOutOfRange(self.rejected_score));
        }
        if self.chosen_score <= self.rejected_score {
            return Err(TypeError::ScoreOrder {
                chosen: self.chosen_score,
                rejected: self.rejected_score,
            });
        }
        if self.iteration == 0 {
            return Err(TypeError::IterationZero);
        }
        Ok(())
    }
}

/// A seed preference example used for offline initialization; unlike
/// generated pairs it carries no prefix scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflinePair {
    pub prompt_id: PromptId,
    pub chosen: String,
    pub rejected: String,
}

/// A supervised fine-tuning example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt_id: PromptId,
    pub response: String,
}

/// Per-iteration rejected prefix scores. The chosen score is always
/// [`CHOSEN_SCORE`]; raising the rejected score across iterations narrows
/// the engineered quality gap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreSchedule {
    pub rejected_scores: Vec<u8>,
}

impl ScoreSchedule {
    pub fn new(rejected_scores: Vec<u8>) -> Self {
        ScoreSchedule { rejected_scores }
    }

    pub fn len(&self) -> usize {
        self.rejected_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rejected_scores.is_empty()
    }

    /// Rejected score for a 1-based iteration index.
    pub fn score_for(&self, iteration: usize) -> Option<u8> {
        if iteration == 0 {
            return None;
        }
        self.rejected_scores.get(iteration - 1).copied()
    }
}

impl Default for ScoreSchedule {
    /// The curriculum used in the reported ablations. A steeper 3/5/9
    /// variant works too; pass it explicitly where wanted.
    fn default() -> Self {
        ScoreSchedule::new(vec![3, 5, 7])
    }
}

/// Checks a schedule against a run length: one entry per iteration, each in
/// 1..=9, monotonically non-decreasing.
pub fn validate_schedule(
    schedule: &ScoreSchedule,
    iterations: usize,
) -> Result<(), ScheduleError> {
    if schedule.len() != iterations {
        return Err(ScheduleError::LengthMismatch {
            expected: iterations,
            got: schedule.len(),
        });
    }
    let mut prev: Option<u8> = None;
    for (position, &score) in schedule.rejected_scores.iter().enumerate() {
        if !(1..=9).contains(&score) {
            return Err(ScheduleError::ScoreOutOfRange { position, score });
        }
        if let Some(p) = prev {
            if score < p {
                return Err(ScheduleError::NonMonotone { position });
            }
        }
        prev = Some(score);
    }
    Ok(())
}

/// Counts reported by dataset generation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub iteration: usize,
    pub rejected_score: u8,
    pub prompts_total: usize,
    pub pairs_written: usize,
    pub skipped_cleaning: usize,
    pub skipped_duplicate: usize,
}

/// Metrics recorded at the end of each training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub mean_chosen_reward: f64,
    pub mean_rejected_reward: f64,
    pub gap: f64,
    pub policy_expected_reward: f64,
    pub greedy_reward: f64,
    pub dpo_loss_final: f64,
}

/// Record of the initialization stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub snapshot_path: String,
    pub snapshot_hash: String,
    pub sft_final_loss: f64,
    pub offline_final_loss: Option<f64>,
    pub policy_expected_reward: f64,
    pub greedy_reward: f64,
}

/// Record of one self-rewarding iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub rejected_score: u8,
    pub dataset_path: String,
    pub summary: DatasetSummary,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub snapshot_path: String,
    pub snapshot_hash: String,
    pub metrics: IterationMetrics,
}

/// Everything needed to reproduce a run bit-for-bit on the exact backend:
/// the resolved configuration, the master seed, and per-iteration records.
/// Paths are relative to the run directory so two runs of the same config
/// produce byte-identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub master_seed: u64,
    pub config: serde_json::Value,
    pub init: Option<InitRecord>,
    pub iterations: Vec<IterationRecord>,
}

impl RunManifest {
    pub fn new(master_seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed,
            config,
            init: None,
            iterations: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TypeError> {
        let body = serde_json::to_string_pretty(self).map_err(|source| TypeError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, body + "\n").map_err(|source| TypeError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TypeError> {
        let raw = std::fs::read_to_string(path).map_err(|source| TypeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|source| TypeError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Reads a JSONL preference dataset, validating every line.
pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, TypeError> {
    let raw = std::fs::read_to_string(path).map_err(|source| TypeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut pairs = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair =
            serde_json::from_str(line).map_err(|source| TypeError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Reads a JSONL offline seed-pair file.
pub fn load_offline_pairs(path: &Path) -> Result<Vec<OfflinePair>, TypeError> {
    let raw = std::fs::read_to_string(path).map_err(|source| TypeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut pairs = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(
            serde_json::from_str(line).map_err(|source| TypeError::Parse {
                path: path.display().to_string(),
                source,
            })?,
        );
    }
    Ok(pairs)
}

/// Reads an SFT dataset (JSON array).
pub fn load_sft_data(path: &Path) -> Result<Vec<SftExample>, TypeError> {
    let raw = std::fs::read_to_string(path).map_err(|source| TypeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|source| TypeError::Parse {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_359_ok_for_three_iterations() {
        assert!(validate_schedule(&ScoreSchedule::new(vec![3, 5, 9]), 3).is_ok());
    }

    #[test]
    fn schedule_357_ok_for_three_iterations() {
        assert!(validate_schedule(&ScoreSchedule::new(vec![3, 5, 7]), 3).is_ok());
    }

    #[test]
    fn schedule_537_non_monotone() {
        assert_eq!(
            validate_schedule(&ScoreSchedule::new(vec![5, 3, 7]), 3),
            Err(ScheduleError::NonMonotone { position: 1 })
        );
    }

    #[test]
    fn schedule_length_mismatch() {
        assert_eq!(
            validate_schedule(&ScoreSchedule::new(vec![3, 5]), 3),
            Err(ScheduleError::LengthMismatch {
                expected: 3,
                got: 2
            })
        );
    }

    #[test]
    fn schedule_score_out_of_range() {
        assert_eq!(
            validate_schedule(&ScoreSchedule::new(vec![0, 5, 7]), 3),
            Err(ScheduleError::ScoreOutOfRange {
                position: 0,
                score: 0
            })
        );
        assert_eq!(
            validate_schedule(&ScoreSchedule::new(vec![3, 5, 10]), 3),
            Err(ScheduleError::ScoreOutOfRange {
                position: 2,
                score: 10
            })
        );
    }

    #[test]
    fn pair_jsonl_key_order_is_stable() {
        let pair = PreferencePair::new(
            PromptId::new("p0"),
            "Explain tides.".into(),
            "Tides follow the moon.".into(),
            "Water moves.".into(),
            10,
            3,
            1,
        )
        .unwrap();
        let line = serde_json::to_string(&pair).unwrap();
        assert!(line.starts_with(
            "{\"prompt_id\":\"p0\",\"prompt\":\"Explain tides.\",\"chosen\":"
        ));
        let back: PreferencePair = serde_json::from_str(&line).unwrap();
        assert_eq!(back, pair);
    }

    #[test]
    fn pair_rejects_score_inversion() {
        let err = PreferencePair::new(
            PromptId::new("p0"),
            "x".into(),
            "a".into(),
            "b".into(),
            3,
            10,
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn prompt_set_rejects_duplicates_and_empty_text() {
        let dup = PromptSet::new(vec![Prompt::new("a", "x"), Prompt::new("a", "y")]);
        assert!(dup.is_err());
        let empty = PromptSet::new(vec![Prompt::new("a", "")]);
        assert!(empty.is_err());
    }

    #[test]
    fn response_space_rejects_duplicates_and_cap() {
        assert!(ResponseSpace::new(vec!["a".into(), "a".into()]).is_err());
        assert!(ResponseSpace::with_cap(vec!["a".into(), "b".into()], 1).is_err());
        assert!(ResponseSpace::new(vec![]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut manifest = RunManifest::new(42, serde_json::json!({"beta": 0.1}));
        manifest.iterations.push(IterationRecord {
            iteration: 1,
            rejected_score: 3,
            dataset_path: "iter1/dataset.jsonl".into(),
            summary: DatasetSummary::default(),
            initial_loss: 0.7,
            final_loss: 0.5,
            snapshot_path: "iter1/policy.snapshot".into(),
            snapshot_hash: "abc".into(),
            metrics: IterationMetrics {
                mean_chosen_reward: 9.0,
                mean_rejected_reward: 3.0,
                gap: 6.0,
                policy_expected_reward: 7.0,
                greedy_reward: 8.0,
                dpo_loss_final: 0.5,
            },
        });
        manifest.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, manifest);
    }
}
