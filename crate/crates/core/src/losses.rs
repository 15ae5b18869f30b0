//! Training objectives over tabular policies: supervised fine-tuning,
//! pairwise preference optimization against a frozen reference, and the
//! reference-free length-normalized variant. Each returns the loss value,
//! the exact analytic gradient with respect to the policy logits, and the
//! per-pair sigmoid arguments. `grad_check` verifies any of them against
//! central finite differences.

use thiserror::Error;

use crate::policy::{PolicyError, ResponseDist, TabularPolicy};
use crate::types::{OfflinePair, PreferencePair, PromptId, ResponseSpace, SftExample};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("response not in the space: `{response}`")]
    UnknownResponse { response: String },
    #[error("response has no tokens: `{response}`")]
    ZeroLengthResponse { response: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("target margin must be >= 0, got {0}")]
    NegativeTargetMargin(f64),
    #[error("non-finite loss or gradient")]
    NonFinite,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Loss value, gradient shaped like the policy logits, and the per-pair
/// margins (sigmoid arguments; empty for SFT).
#[derive(Clone, Debug)]
pub struct LossReport {
    pub value: f64,
    pub gradient: Vec<Vec<f64>>,
    pub margins: Vec<f64>,
}

impl LossReport {
    fn validate(self) -> Result<Self, LossError> {
        if !self.value.is_finite()
            || self
                .gradient
                .iter()
                .any(|row| row.iter().any(|g| !g.is_finite()))
        {
            return Err(LossError::NonFinite);
        }
        Ok(self)
    }
}

/// A chosen/rejected pair usable by the pairwise losses; implemented by both
/// generated and offline seed pairs.
pub trait PreferenceExample {
    fn prompt_id(&self) -> &PromptId;
    fn chosen(&self) -> &str;
    fn rejected(&self) -> &str;
}

impl PreferenceExample for PreferencePair {
    fn prompt_id(&self) -> &PromptId {
        &self.prompt_id
    }
    fn chosen(&self) -> &str {
        &self.chosen
    }
    fn rejected(&self) -> &str {
        &self.rejected
    }
}

impl PreferenceExample for OfflinePair {
    fn prompt_id(&self) -> &PromptId {
        &self.prompt_id
    }
    fn chosen(&self) -> &str {
        &self.chosen
    }
    fn rejected(&self) -> &str {
        &self.rejected
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// -ln(sigmoid(x)) = softplus(-x), stable for |x| up to at least 1e4.
fn neg_log_sigmoid(x: f64) -> f64 {
    let z = -x;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn resolve(space: &ResponseSpace, response: &str) -> Result<usize, LossError> {
    space
        .index_of(response)
        .ok_or_else(|| LossError::UnknownResponse {
            response: response.to_string(),
        })
}

/// Mean of -ln pi(y|x) over the dataset with the exact softmax
/// cross-entropy gradient.
pub fn sft_loss(
    policy: &TabularPolicy,
    space: &ResponseSpace,
    data: &[SftExample],
) -> Result<LossReport, LossError> {
    if data.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = data.len() as f64;
    let temp = policy.temperature();
    let mut value = 0.0;
    let mut gradient = policy.zeros_like();
    for example in data {
        let target = resolve(space, &example.response)?;
        let row = policy.row_index(&example.prompt_id)?;
        let log_probs = policy.log_probs(&example.prompt_id)?;
        value += -log_probs[target];
        let probs = policy.probs(&example.prompt_id)?;
        for (k, &p) in probs.iter().enumerate() {
            let indicator = if k == target { 1.0 } else { 0.0 };
            gradient[row][k] += (p - indicator) / (temp * n);
        }
    }
    LossReport {
        value: value / n,
        gradient,
        margins: Vec::new(),
    }
    .validate()
}

/// Mean of -ln sigmoid(beta * (log-ratio of chosen minus log-ratio of
/// rejected)) against a frozen reference.
///
/// The policy-side log ratio reduces to (logit_w - logit_l)/T; computing it
/// that way keeps the loss exactly independent of the other logits, so the
/// zero entries of the gradient are exact.
pub fn dpo_loss<E: PreferenceExample>(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    space: &ResponseSpace,
    pairs: &[E],
    beta: f64,
) -> Result<LossReport, LossError> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if beta <= 0.0 {
        return Err(LossError::NonPositiveBeta(beta));
    }
    let n = pairs.len() as f64;
    let temp = policy.temperature();
    let mut value = 0.0;
    let mut gradient = policy.zeros_like();
    let mut margins = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let w = resolve(space, pair.chosen())?;
        let l = resolve(space, pair.rejected())?;
        let row = policy.row_index(pair.prompt_id())?;
        let logits = policy.logits_row(pair.prompt_id())?;
        let ref_row = reference.logits_row(pair.prompt_id())?;
        let policy_ratio = (logits[w] - logits[l]) / temp;
        let ref_ratio = (ref_row[w] - ref_row[l]) / reference.temperature();
        let margin = beta * (policy_ratio - ref_ratio);
        value += neg_log_sigmoid(margin);
        let coeff = (sigmoid(margin) - 1.0) * beta / (temp * n);
        gradient[row][w] += coeff;
        gradient[row][l] -= coeff;
        margins.push(margin);
    }
    LossReport {
        value: value / n,
        gradient,
        margins,
    }
    .validate()
}

fn token_count(response: &str) -> Result<f64, LossError> {
    let count = response.split_whitespace().count();
    if count == 0 {
        return Err(LossError::ZeroLengthResponse {
            response: response.to_string(),
        });
    }
    Ok(count as f64)
}

/// Reference-free pairwise loss with length-normalized log-probabilities and
/// a target margin: mean of
/// -ln sigmoid((beta/|y_w|) ln pi(y_w|x) - (beta/|y_l|) ln pi(y_l|x) - m).
/// Lengths are whitespace-token counts.
pub fn simpo_loss<E: PreferenceExample>(
    policy: &TabularPolicy,
    space: &ResponseSpace,
    pairs: &[E],
    beta: f64,
    target_margin: f64,
) -> Result<LossReport, LossError> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if beta <= 0.0 {
        return Err(LossError::NonPositiveBeta(beta));
    }
    if target_margin < 0.0 {
        return Err(LossError::NegativeTargetMargin(target_margin));
    }
    let n = pairs.len() as f64;
    let temp = policy.temperature();
    let mut value = 0.0;
    let mut gradient = policy.zeros_like();
    let mut margins = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let w = resolve(space, pair.chosen())?;
        let l = resolve(space, pair.rejected())?;
        let len_w = token_count(pair.chosen())?;
        let len_l = token_count(pair.rejected())?;
        let row = policy.row_index(pair.prompt_id())?;
        let logits = policy.logits_row(pair.prompt_id())?;
        let scaled: Vec<f64> = logits.iter().map(|&v| v / temp).collect();
        let lse = crate::policy::log_sum_exp(&scaled);
        // Factored so the log-partition drops out exactly when the two
        // lengths coincide.
        let margin = beta
            * (scaled[w] / len_w - scaled[l] / len_l - lse * (1.0 / len_w - 1.0 / len_l))
            - target_margin;
        value += neg_log_sigmoid(margin);
        let coeff = (sigmoid(margin) - 1.0) / n;
        let probs = policy.probs(pair.prompt_id())?;
        for (k, &p) in probs.iter().enumerate() {
            let dw = (if k == w { 1.0 } else { 0.0 }) - p;
            let dl = (if k == l { 1.0 } else { 0.0 }) - p;
            gradient[row][k] += coeff * (beta / len_w * dw - beta / len_l * dl) / temp;
        }
        margins.push(margin);
    }
    LossReport {
        value: value / n,
        gradient,
        margins,
    }
    .validate()
}

/// Central finite differences against the analytic gradient; returns the
/// maximum relative error |g_a - g_fd| / max(1e-12, |g_a| + |g_fd|)
/// over all logits. Requires epsilon in [1e-7, 1e-3].
pub fn grad_check<F>(
    loss_fn: F,
    policy: &TabularPolicy,
    epsilon: f64,
) -> Result<f64, LossError>
where
    F: Fn(&TabularPolicy) -> Result<LossReport, LossError>,
{
    assert!(
        (1e-7..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside [1e-7, 1e-3]"
    );
    let report = loss_fn(policy)?;
    let ids: Vec<PromptId> = policy.prompt_ids().to_vec();
    let mut max_rel = 0.0_f64;
    for (i, id) in ids.iter().enumerate() {
        for k in 0..policy.n_responses() {
            let eval = |delta: f64| -> Result<f64, LossError> {
                let mut perturbed_logits: Vec<Vec<f64>> = policy.logits().to_vec();
                perturbed_logits[i][k] += delta;
                let perturbed = TabularPolicy::from_logits(
                    ids.clone(),
                    perturbed_logits,
                    policy.temperature(),
                )?;
                Ok(loss_fn(&perturbed)?.value)
            };
            let fd = (eval(epsilon)? - eval(-epsilon)?) / (2.0 * epsilon);
            let analytic = report.gradient[i][k];
            let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-12);
            max_rel = max_rel.max(rel);
            let _ = id;
        }
    }
    Ok(max_rel)
}
