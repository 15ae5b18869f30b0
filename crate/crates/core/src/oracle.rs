//! Ground-truth bounded reward f(x, y), the laboratory's stand-in for human
//! preference. Two kinds: an explicit per-(prompt, response) table, and a
//! per-prompt target string scored by normalized edit similarity.
//!
//! Oracles are deterministic and bounded: 0 <= f(x, y) <= r_max always.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::types::{PromptId, ResponseSpace};

pub const DEFAULT_R_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(PromptId),
    #[error("response not in the oracle's space: `{response}`")]
    UnknownResponse { response: String },
    #[error("reward {value} for prompt `{prompt}` response {index} outside [0, {r_max}]")]
    RewardOutOfRange {
        prompt: PromptId,
        index: usize,
        value: f64,
        r_max: f64,
    },
    #[error("r_max must be positive, got {0}")]
    NonPositiveRMax(f64),
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

#[derive(Clone, Debug)]
enum OracleKind {
    Table {
        rewards: HashMap<PromptId, HashMap<usize, f64>>,
        response_index: HashMap<String, usize>,
    },
    TargetMatch {
        targets: HashMap<PromptId, String>,
    },
}

/// Bounded deterministic reward function.
#[derive(Clone, Debug)]
pub struct RewardOracle {
    r_max: f64,
    kind: OracleKind,
}

impl RewardOracle {
    /// Table oracle over an explicit (prompt, response index) -> reward map.
    /// The response space fixes the string-to-index resolution.
    pub fn table(
        rewards: HashMap<PromptId, HashMap<usize, f64>>,
        space: &ResponseSpace,
        r_max: f64,
    ) -> Result<Self, OracleError> {
        if r_max <= 0.0 {
            return Err(OracleError::NonPositiveRMax(r_max));
        }
        for (prompt, row) in &rewards {
            for (&index, &value) in row {
                if !(0.0..=r_max).contains(&value) || !value.is_finite() {
                    return Err(OracleError::RewardOutOfRange {
                        prompt: prompt.clone(),
                        index,
                        value,
                        r_max,
                    });
                }
            }
        }
        let response_index = space
            .iter()
            .enumerate()
            .map(|(i, r)| (r.to_string(), i))
            .collect();
        Ok(RewardOracle {
            r_max,
            kind: OracleKind::Table {
                rewards,
                response_index,
            },
        })
    }

    /// Target-match oracle: reward = r_max * (1 - dist / max_len), the
    /// normalized edit similarity to the prompt's target string.
    pub fn target_match(
        targets: HashMap<PromptId, String>,
        r_max: f64,
    ) -> Result<Self, OracleError> {
        if r_max <= 0.0 {
            return Err(OracleError::NonPositiveRMax(r_max));
        }
        Ok(RewardOracle {
            r_max,
            kind: OracleKind::TargetMatch { targets },
        })
    }

    /// Loads a table oracle from `{prompt_id: {response_index: reward}}`.
    pub fn load_table(
        path: &Path,
        space: &ResponseSpace,
        r_max: f64,
    ) -> Result<Self, OracleError> {
        let raw = std::fs::read_to_string(path).map_err(|source| OracleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        #[derive(Deserialize)]
        struct FileMap(HashMap<String, HashMap<String, f64>>);
        let FileMap(map) = serde_json::from_str(&raw).map_err(|source| OracleError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let mut rewards = HashMap::with_capacity(map.len());
        for (prompt, row) in map {
            let mut parsed = HashMap::with_capacity(row.len());
            for (k, v) in row {
                let index: usize = k.parse().map_err(|_| OracleError::Parse {
                    path: path.display().to_string(),
                    source: serde_json::Error::io(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("response index `{k}` is not an integer"),
                    )),
                })?;
                parsed.insert(index, v);
            }
            rewards.insert(PromptId::new(prompt), parsed);
        }
        RewardOracle::table(rewards, space, r_max)
    }

    /// Loads a target-match oracle from `{prompt_id: target_string}`.
    pub fn load_target_match(path: &Path, r_max: f64) -> Result<Self, OracleError> {
        let raw = std::fs::read_to_string(path).map_err(|source| OracleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let map: HashMap<String, String> =
            serde_json::from_str(&raw).map_err(|source| OracleError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        let targets = map
            .into_iter()
            .map(|(k, v)| (PromptId::new(k), v))
            .collect();
        RewardOracle::target_match(targets, r_max)
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// f(x, y) for one response.
    pub fn score(&self, prompt: &PromptId, response: &str) -> Result<f64, OracleError> {
        match &self.kind {
            OracleKind::Table {
                rewards,
                response_index,
            } => {
                let index = response_index.get(response).copied().ok_or_else(|| {
                    OracleError::UnknownResponse {
                        response: response.to_string(),
                    }
                })?;
                let row = rewards
                    .get(prompt)
                    .ok_or_else(|| OracleError::UnknownPrompt(prompt.clone()))?;
                row.get(&index)
                    .copied()
                    .ok_or_else(|| OracleError::UnknownResponse {
                        response: response.to_string(),
                    })
            }
            OracleKind::TargetMatch { targets } => {
                let target = targets
                    .get(prompt)
                    .ok_or_else(|| OracleError::UnknownPrompt(prompt.clone()))?;
                Ok(self.r_max * edit_similarity(response, target))
            }
        }
    }

    /// Elementwise `score`, same order as the input.
    pub fn batch_score(
        &self,
        prompt: &PromptId,
        responses: &[&str],
    ) -> Result<Vec<f64>, OracleError> {
        responses.iter().map(|r| self.score(prompt, r)).collect()
    }

    /// Rewards for an entire response space, indexed like the space.
    pub fn reward_row(
        &self,
        prompt: &PromptId,
        space: &ResponseSpace,
    ) -> Result<Vec<f64>, OracleError> {
        space.iter().map(|r| self.score(prompt, r)).collect()
    }
}

/// Levenshtein distance over unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ac) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bc) in b.iter().enumerate() {
            let cost = usize::from(ac != bc);
            cur[j + 1] = (cur[j] + 1).min(prev[j + 1] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized edit similarity 1 - dist/max_len, in [0, 1]. Two empty
/// strings are identical, similarity 1.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / max_len as f64
}
