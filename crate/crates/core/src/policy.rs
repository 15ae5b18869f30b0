//! Tabular softmax policies and the theory they make exactly checkable:
//! the score-conditioned tilt of the reference policy, the KL-regularized
//! objective, its closed-form optimum, and the quality gap between
//! conditioning scores.
//!
//! Response spaces are finite, so every expectation here is an exact
//! enumeration, never a Monte Carlo estimate. All exponentials use
//! max-subtraction; distributions normalize to 1 within 1e-12.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::oracle::{OracleError, RewardOracle};
use crate::types::{PromptId, PromptSet, ResponseSpace};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(PromptId),
    #[error("response index {index} out of range for space of {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("policy support is not contained in the reference support")]
    SupportViolation,
    #[error("non-finite value in {context}")]
    NumericOverflow { context: &'static str },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("quality gap is not positive for distinct policies: {gap}")]
    NonPositiveGap { gap: f64 },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Error)]
pub enum SnapshotError {
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
    #[error("snapshot at {path} has unsupported format `{format}`")]
    Format { path: String, format: String },
    #[error("snapshot at {path} failed its content-hash check")]
    HashMismatch { path: String },
    #[error("bad logit string `{0}` in snapshot")]
    BadLogit(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Numerically stable softmax with temperature.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log(sum(exp(x_i))) with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Inverse-CDF sample from an explicit distribution.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// KL(p || q) over explicit distributions. Terms with p_i = 0 contribute 0;
/// q_i = 0 with p_i > 0 is a support violation.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, PolicyError> {
    if p.len() != q.len() {
        return Err(PolicyError::InvalidParameter(format!(
            "kl over mismatched lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(PolicyError::SupportViolation);
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Anything that yields an explicit distribution over the response space
/// for each prompt.
pub trait ResponseDist {
    fn probs(&self, prompt: &PromptId) -> Result<Vec<f64>, PolicyError>;

    fn sample<R: Rng>(&self, prompt: &PromptId, rng: &mut R) -> Result<usize, PolicyError> {
        Ok(sample_index(&self.probs(prompt)?, rng))
    }
}

/// Explicit softmax policy over a finite response set per prompt. Houses
/// every role a policy plays here: the trainable policy, the reference, and
/// the tilt bases.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    ids: Vec<PromptId>,
    index: HashMap<PromptId, usize>,
    logits: Vec<Vec<f64>>,
    n_responses: usize,
    temperature: f64,
}

impl TabularPolicy {
    /// Zero logits: uniform over the space for every prompt.
    pub fn uniform(prompts: &PromptSet, n_responses: usize) -> Self {
        let ids: Vec<PromptId> = prompts.ids().cloned().collect();
        let index = ids.iter().cloned().zip(0..).collect();
        TabularPolicy {
            logits: vec![vec![0.0; n_responses]; ids.len()],
            ids,
            index,
            n_responses,
            temperature: 1.0,
        }
    }

    pub fn from_logits(
        ids: Vec<PromptId>,
        logits: Vec<Vec<f64>>,
        temperature: f64,
    ) -> Result<Self, PolicyError> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(PolicyError::InvalidParameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if ids.len() != logits.len() {
            return Err(PolicyError::InvalidParameter(format!(
                "{} prompt ids but {} logit rows",
                ids.len(),
                logits.len()
            )));
        }
        let n_responses = logits.first().map_or(0, Vec::len);
        if n_responses == 0 {
            return Err(PolicyError::InvalidParameter(
                "logit rows must be non-empty".into(),
            ));
        }
        for row in &logits {
            if row.len() != n_responses {
                return Err(PolicyError::InvalidParameter("ragged logit rows".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(PolicyError::NumericOverflow { context: "logits" });
            }
        }
        let index = ids.iter().cloned().zip(0..).collect();
        Ok(TabularPolicy {
            ids,
            index,
            logits,
            n_responses,
            temperature,
        })
    }

    pub fn prompt_ids(&self) -> &[PromptId] {
        &self.ids
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn row_index(&self, prompt: &PromptId) -> Result<usize, PolicyError> {
        self.index
            .get(prompt)
            .copied()
            .ok_or_else(|| PolicyError::UnknownPrompt(prompt.clone()))
    }

    pub fn logits_row(&self, prompt: &PromptId) -> Result<&[f64], PolicyError> {
        Ok(&self.logits[self.row_index(prompt)?])
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    /// In-place gradient step: logits -= scale * step, elementwise.
    pub fn apply_step(&mut self, step: &[Vec<f64>], scale: f64) -> Result<(), PolicyError> {
        if step.len() != self.logits.len() {
            return Err(PolicyError::InvalidParameter("gradient shape mismatch".into()));
        }
        for (row, srow) in self.logits.iter_mut().zip(step.iter()) {
            if srow.len() != row.len() {
                return Err(PolicyError::InvalidParameter("gradient shape mismatch".into()));
            }
            for (l, s) in row.iter_mut().zip(srow.iter()) {
                *l -= scale * s;
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.n_responses]; self.logits.len()]
    }

    /// exp(logit/T) / sum exp(logit'/T) for one response.
    pub fn prob(&self, prompt: &PromptId, response_index: usize) -> Result<f64, PolicyError> {
        if response_index >= self.n_responses {
            return Err(PolicyError::IndexOutOfRange {
                index: response_index,
                size: self.n_responses,
            });
        }
        Ok(self.probs(prompt)?[response_index])
    }

    /// Normalized log-probabilities for one prompt.
    pub fn log_probs(&self, prompt: &PromptId) -> Result<Vec<f64>, PolicyError> {
        let row = self.logits_row(prompt)?;
        let scaled: Vec<f64> = row.iter().map(|&l| l / self.temperature).collect();
        let lse = log_sum_exp(&scaled);
        Ok(scaled.into_iter().map(|s| s - lse).collect())
    }

    /// Index of the highest-probability response (first index on ties).
    pub fn greedy(&self, prompt: &PromptId) -> Result<usize, PolicyError> {
        let row = self.logits_row(prompt)?;
        let mut best = 0;
        for (i, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

impl ResponseDist for TabularPolicy {
    fn probs(&self, prompt: &PromptId) -> Result<Vec<f64>, PolicyError> {
        Ok(softmax(self.logits_row(prompt)?, self.temperature))
    }
}

/// The Bayes-derived score-conditioned distribution: the reference policy
/// tilted by exp(-gamma * |f(x,y) - r|^alpha) and renormalized. Shares the
/// reference's support for any finite gamma.
#[derive(Clone)]
pub struct ConditionalPolicy<'a> {
    base: &'a TabularPolicy,
    oracle: &'a RewardOracle,
    space: &'a ResponseSpace,
    score: f64,
    gamma: f64,
    alpha: f64,
}

impl<'a> ConditionalPolicy<'a> {
    pub fn new(
        base: &'a TabularPolicy,
        oracle: &'a RewardOracle,
        space: &'a ResponseSpace,
        score: f64,
        gamma: f64,
        alpha: f64,
    ) -> Result<Self, PolicyError> {
        if !(0.0..=oracle.r_max()).contains(&score) {
            return Err(PolicyError::InvalidParameter(format!(
                "conditioning score {score} outside [0, {}]",
                oracle.r_max()
            )));
        }
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(PolicyError::InvalidParameter(format!(
                "gamma must be finite and >= 0, got {gamma}"
            )));
        }
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(PolicyError::InvalidParameter(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(ConditionalPolicy {
            base,
            oracle,
            space,
            score,
            gamma,
            alpha,
        })
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn prob(&self, prompt: &PromptId, response_index: usize) -> Result<f64, PolicyError> {
        let probs = self.probs(prompt)?;
        probs
            .get(response_index)
            .copied()
            .ok_or(PolicyError::IndexOutOfRange {
                index: response_index,
                size: probs.len(),
            })
    }
}

impl ResponseDist for ConditionalPolicy<'_> {
    fn probs(&self, prompt: &PromptId) -> Result<Vec<f64>, PolicyError> {
        let rewards = self.oracle.reward_row(prompt, self.space)?;
        let base_log = self.base.log_probs(prompt)?;
        let tilted: Vec<f64> = base_log
            .iter()
            .zip(rewards.iter())
            .map(|(&lp, &f)| lp - self.gamma * (f - self.score).abs().powf(self.alpha))
            .collect();
        let lse = log_sum_exp(&tilted);
        let probs: Vec<f64> = tilted.into_iter().map(|t| (t - lse).exp()).collect();
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(PolicyError::NumericOverflow {
                context: "conditional tilt",
            });
        }
        Ok(probs)
    }
}

fn mean_over_prompts<F>(prompts: &PromptSet, mut per_prompt: F) -> Result<f64, PolicyError>
where
    F: FnMut(&PromptId) -> Result<f64, PolicyError>,
{
    if prompts.is_empty() {
        return Err(PolicyError::InvalidParameter("empty prompt set".into()));
    }
    let mut total = 0.0;
    for id in prompts.ids() {
        total += per_prompt(id)?;
    }
    Ok(total / prompts.len() as f64)
}

/// E_{y ~ pi}[f(x, y)] - beta * KL(pi || ref), averaged over prompts, all
/// expectations exact by enumeration.
pub fn rlhf_objective<D: ResponseDist>(
    pi: &D,
    reference: &TabularPolicy,
    oracle: &RewardOracle,
    prompts: &PromptSet,
    space: &ResponseSpace,
    beta: f64,
) -> Result<f64, PolicyError> {
    if beta <= 0.0 {
        return Err(PolicyError::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    mean_over_prompts(prompts, |id| {
        let p = pi.probs(id)?;
        let r = reference.probs(id)?;
        let rewards = oracle.reward_row(id, space)?;
        let expected: f64 = p.iter().zip(rewards.iter()).map(|(&pi, &f)| pi * f).sum();
        Ok(expected - beta * kl_divergence(&p, &r)?)
    })
}

/// E_{y ~ pi}[-gamma * |f(x, y) - r_target|^alpha] - beta * KL(pi || ref),
/// averaged over prompts.
#[allow(clippy::too_many_arguments)]
pub fn score_conditioned_objective<D: ResponseDist>(
    pi: &D,
    reference: &TabularPolicy,
    oracle: &RewardOracle,
    prompts: &PromptSet,
    space: &ResponseSpace,
    beta: f64,
    gamma: f64,
    alpha: f64,
    r_target: f64,
) -> Result<f64, PolicyError> {
    if beta <= 0.0 {
        return Err(PolicyError::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if !(0.0..=oracle.r_max()).contains(&r_target) {
        return Err(PolicyError::InvalidParameter(format!(
            "r_target {r_target} outside [0, {}]",
            oracle.r_max()
        )));
    }
    mean_over_prompts(prompts, |id| {
        let p = pi.probs(id)?;
        let r = reference.probs(id)?;
        let rewards = oracle.reward_row(id, space)?;
        let expected: f64 = p
            .iter()
            .zip(rewards.iter())
            .map(|(&pi, &f)| pi * (-gamma * (f - r_target).abs().powf(alpha)))
            .sum();
        Ok(expected - beta * kl_divergence(&p, &r)?)
    })
}

/// The closed-form KL-regularized optimum: the reference tilted by
/// exp(reward / beta), with per-prompt log partition and the optimal
/// objective value beta * mean(ln Z).
#[derive(Clone, Debug)]
pub struct OptimalPolicy {
    ids: Vec<PromptId>,
    index: HashMap<PromptId, usize>,
    pub rows: Vec<Vec<f64>>,
    pub log_partition: Vec<f64>,
    pub optimal_value: f64,
}

impl ResponseDist for OptimalPolicy {
    fn probs(&self, prompt: &PromptId) -> Result<Vec<f64>, PolicyError> {
        self.index
            .get(prompt)
            .map(|&i| self.rows[i].clone())
            .ok_or_else(|| PolicyError::UnknownPrompt(prompt.clone()))
    }
}

/// pi_p(y|x) = pi_ref(y|x) * exp(reward(x,y)/beta) / Z_p(x), computed in log
/// space. Works for any bounded reward function, in particular the negated
/// score distance of the conditioned objective and the raw oracle reward.
pub fn optimal_policy<F>(
    reference: &TabularPolicy,
    prompts: &PromptSet,
    mut reward: F,
    beta: f64,
) -> Result<OptimalPolicy, PolicyError>
where
    F: FnMut(&PromptId, usize) -> f64,
{
    if beta <= 0.0 {
        return Err(PolicyError::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if prompts.is_empty() {
        return Err(PolicyError::InvalidParameter("empty prompt set".into()));
    }
    let mut rows = Vec::with_capacity(prompts.len());
    let mut log_partition = Vec::with_capacity(prompts.len());
    let mut ids = Vec::with_capacity(prompts.len());
    for id in prompts.ids() {
        let base_log = reference.log_probs(id)?;
        let tilted: Vec<f64> = base_log
            .iter()
            .enumerate()
            .map(|(y, &lp)| {
                let r = reward(id, y);
                lp + r / beta
            })
            .collect();
        if tilted.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NumericOverflow {
                context: "optimal policy tilt",
            });
        }
        let lse = log_sum_exp(&tilted);
        rows.push(tilted.iter().map(|&t| (t - lse).exp()).collect());
        log_partition.push(lse);
        ids.push(id.clone());
    }
    let optimal_value =
        beta * log_partition.iter().sum::<f64>() / log_partition.len() as f64;
    let index = ids.iter().cloned().zip(0..).collect();
    Ok(OptimalPolicy {
        ids,
        index,
        rows,
        log_partition,
        optimal_value,
    })
}

impl OptimalPolicy {
    pub fn prompt_ids(&self) -> &[PromptId] {
        &self.ids
    }
}

/// Outcome of the quality-gap check between conditioning scores.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityGap {
    pub j_good: f64,
    pub j_bad: f64,
    pub gap: f64,
    /// The two conditional policies are identical (constant reward,
    /// r_good == r_bad, or gamma == 0); the gap is exactly zero and the
    /// strict inequality does not apply.
    pub degenerate: bool,
}

/// Evaluates the conditioned objective (r_target = r_good) at the two
/// score-conditioned policies pi(.|., r_good) and pi(.|., r_bad). For
/// distinct policies the gap must be strictly positive; a non-positive gap
/// is an error. Identical policies are reported as degenerate with gap 0.
#[allow(clippy::too_many_arguments)]
pub fn quality_gap(
    reference: &TabularPolicy,
    oracle: &RewardOracle,
    prompts: &PromptSet,
    space: &ResponseSpace,
    beta: f64,
    gamma: f64,
    alpha: f64,
    r_good: f64,
    r_bad: f64,
) -> Result<QualityGap, PolicyError> {
    if r_bad > r_good {
        return Err(PolicyError::InvalidParameter(format!(
            "r_bad {r_bad} must not exceed r_good {r_good}"
        )));
    }
    let good = ConditionalPolicy::new(reference, oracle, space, r_good, gamma, alpha)?;
    let bad = ConditionalPolicy::new(reference, oracle, space, r_bad, gamma, alpha)?;

    // The two tilts coincide exactly when the tilt exponent difference is
    // constant per prompt: gamma = 0, equal scores, or a constant reward
    // row everywhere.
    let mut identical = gamma == 0.0 || r_good == r_bad;
    if !identical {
        identical = true;
        for id in prompts.ids() {
            let row = oracle.reward_row(id, space)?;
            if row.iter().any(|&f| f != row[0]) {
                identical = false;
                break;
            }
        }
    }

    let j_good = score_conditioned_objective(
        &good, reference, oracle, prompts, space, beta, gamma, alpha, r_good,
    )?;
    if identical {
        return Ok(QualityGap {
            j_good,
            j_bad: j_good,
            gap: 0.0,
            degenerate: true,
        });
    }
    let j_bad = score_conditioned_objective(
        &bad, reference, oracle, prompts, space, beta, gamma, alpha, r_good,
    )?;
    let gap = j_good - j_bad;
    if gap <= 0.0 {
        return Err(PolicyError::NonPositiveGap { gap });
    }
    Ok(QualityGap {
        j_good,
        j_bad,
        gap,
        degenerate: false,
    })
}

/// Exact E_{y ~ pi(.|x, r)}[f(x, y)] averaged over prompts; the quantity the
/// prefix-score sweep tracks.
pub fn conditional_expected_reward(
    reference: &TabularPolicy,
    oracle: &RewardOracle,
    prompts: &PromptSet,
    space: &ResponseSpace,
    gamma: f64,
    alpha: f64,
    r: f64,
) -> Result<f64, PolicyError> {
    let cond = ConditionalPolicy::new(reference, oracle, space, r, gamma, alpha)?;
    expected_reward(&cond, oracle, prompts, space)
}

/// Exact E_{y ~ pi}[f(x, y)] averaged over prompts.
pub fn expected_reward<D: ResponseDist>(
    pi: &D,
    oracle: &RewardOracle,
    prompts: &PromptSet,
    space: &ResponseSpace,
) -> Result<f64, PolicyError> {
    mean_over_prompts(prompts, |id| {
        let p = pi.probs(id)?;
        let rewards = oracle.reward_row(id, space)?;
        Ok(p.iter().zip(rewards.iter()).map(|(&pi, &f)| pi * f).sum())
    })
}

/// Mean oracle reward of the argmax response per prompt.
pub fn greedy_reward(
    policy: &TabularPolicy,
    oracle: &RewardOracle,
    prompts: &PromptSet,
    space: &ResponseSpace,
) -> Result<f64, PolicyError> {
    mean_over_prompts(prompts, |id| {
        let y = policy.greedy(id)?;
        let rewards = oracle.reward_row(id, space)?;
        Ok(rewards[y])
    })
}

const SNAPSHOT_FORMAT: &str = "tabular-policy-v1";

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format: String,
    temperature: f64,
    prompt_ids: Vec<String>,
    n_responses: usize,
    logits: Vec<Vec<String>>,
    sha256: String,
}

fn snapshot_hash(temperature: f64, ids: &[String], logits: &[Vec<String>]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(SNAPSHOT_FORMAT.as_bytes());
    hasher.update(format!("{temperature}").as_bytes());
    for id in ids {
        hasher.update([0u8]);
        hasher.update(id.as_bytes());
    }
    for row in logits {
        hasher.update([1u8]);
        for v in row {
            hasher.update([0u8]);
            hasher.update(v.as_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Persists a policy as portable JSON with logits as round-trip-exact
/// decimal strings. Returns the content hash.
pub fn save_snapshot(policy: &TabularPolicy, path: &Path) -> Result<String, SnapshotError> {
    let ids: Vec<String> = policy.ids.iter().map(|id| id.to_string()).collect();
    let logits: Vec<Vec<String>> = policy
        .logits
        .iter()
        .map(|row| row.iter().map(|v| format!("{v}")).collect())
        .collect();
    let sha256 = snapshot_hash(policy.temperature, &ids, &logits);
    let file = SnapshotFile {
        format: SNAPSHOT_FORMAT.to_string(),
        temperature: policy.temperature,
        prompt_ids: ids,
        n_responses: policy.n_responses,
        logits,
        sha256: sha256.clone(),
    };
    let body = serde_json::to_string_pretty(&file).map_err(|source| SnapshotError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, body + "\n").map_err(|source| SnapshotError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(sha256)
}

/// Loads a snapshot, verifying its content hash. Returns the policy and the
/// hash.
pub fn load_snapshot(path: &Path) -> Result<(TabularPolicy, String), SnapshotError> {
    let raw = std::fs::read_to_string(path).map_err(|source| SnapshotError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: SnapshotFile = serde_json::from_str(&raw).map_err(|source| SnapshotError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    if file.format != SNAPSHOT_FORMAT {
        return Err(SnapshotError::Format {
            path: path.display().to_string(),
            format: file.format,
        });
    }
    let expected = snapshot_hash(file.temperature, &file.prompt_ids, &file.logits);
    if expected != file.sha256 {
        return Err(SnapshotError::HashMismatch {
            path: path.display().to_string(),
        });
    }
    let mut logits = Vec::with_capacity(file.logits.len());
    for row in &file.logits {
        let mut parsed = Vec::with_capacity(row.len());
        for v in row {
            parsed.push(
                v.parse::<f64>()
                    .map_err(|_| SnapshotError::BadLogit(v.clone()))?,
            );
        }
        logits.push(parsed);
    }
    let ids = file.prompt_ids.into_iter().map(PromptId::new).collect();
    let policy = TabularPolicy::from_logits(ids, logits, file.temperature)?;
    Ok((policy, file.sha256))
}
