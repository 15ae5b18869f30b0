//! Preference-pair generation: prefix-prompt rendering, a pluggable
//! generation backend (exact score-conditioned sampling over a tabular
//! policy, or an external chat-completions endpoint), regex cleaning of
//! meta-preambles, and JSONL dataset assembly.

mod http;

pub use http::{HttpBackend, RetryPolicy};

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha12Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{OracleError, RewardOracle};
use crate::policy::{ConditionalPolicy, PolicyError, ResponseDist, TabularPolicy};
use crate::seeds;
use crate::types::{
    DatasetSummary, PreferencePair, Prompt, PromptId, PromptSet, ResponseSpace, ScoreSchedule,
    TypeError, CHOSEN_SCORE,
};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("template is missing placeholder {placeholder}")]
    PlaceholderMissing { placeholder: &'static str },
    #[error("template must contain placeholder {placeholder} exactly once")]
    PlaceholderRepeated { placeholder: &'static str },
    #[error("prefix score {0} outside the allowed range")]
    ScoreOutOfRange(u8),
    #[error("iteration {iteration} exceeds schedule length {len}")]
    IterationOutOfSchedule { iteration: usize, len: usize },
    #[error("cleaning rule `{id}` does not compile: {source}")]
    BadRule {
        id: String,
        #[source]
        source: regex::Error,
    },
    #[error("score-to-reward map value {value} outside [0, {r_max}]")]
    BadScoreMap { value: f64, r_max: f64 },
    #[error("http error {status}: {body_excerpt}")]
    Http { status: u16, body_excerpt: String },
    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("auth token environment variable `{env}` is not set")]
    MissingAuthToken { env: String },
    #[error("malformed completion response: {0}")]
    BadCompletion(String),
    #[error("generation failed for {count} prompt(s): {details}")]
    Aggregated { count: usize, details: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

const PROMPT_PLACEHOLDER: &str = "[prompt]";
const SCORE_PLACEHOLDER: &str = "[rejected score]";

/// Which side of a pair a generation request is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Chosen,
    Rejected,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Chosen => "chosen",
            Side::Rejected => "rejected",
        }
    }
}

/// The two generation prefixes. The chosen template carries a fixed
/// "10 out of 10" and only the `[prompt]` placeholder; the rejected template
/// additionally carries `[rejected score]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixTemplate {
    pub chosen_template: String,
    pub rejected_template: String,
}

impl Default for PrefixTemplate {
    fn default() -> Self {
        PrefixTemplate {
            chosen_template: "Please produce a top-notch response that merits a perfect score \
                              of 10 out of 10. [prompt]"
                .to_string(),
            rejected_template: "Please produce a good response that merits a perfect score of \
                                [rejected score] out of 10. [prompt]"
                .to_string(),
        }
    }
}

fn count_occurrences(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

impl PrefixTemplate {
    pub fn validated(
        chosen_template: String,
        rejected_template: String,
    ) -> Result<Self, DatagenError> {
        let template = PrefixTemplate {
            chosen_template,
            rejected_template,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        for (text, needs_score) in [(&self.chosen_template, false), (&self.rejected_template, true)]
        {
            match count_occurrences(text, PROMPT_PLACEHOLDER) {
                0 => {
                    return Err(DatagenError::PlaceholderMissing {
                        placeholder: PROMPT_PLACEHOLDER,
                    })
                }
                1 => {}
                _ => {
                    return Err(DatagenError::PlaceholderRepeated {
                        placeholder: PROMPT_PLACEHOLDER,
                    })
                }
            }
            if needs_score {
                match count_occurrences(text, SCORE_PLACEHOLDER) {
                    0 => {
                        return Err(DatagenError::PlaceholderMissing {
                            placeholder: SCORE_PLACEHOLDER,
                        })
                    }
                    1 => {}
                    _ => {
                        return Err(DatagenError::PlaceholderRepeated {
                            placeholder: SCORE_PLACEHOLDER,
                        })
                    }
                }
            }
        }
        Ok(())
    }

    /// Placeholder substitution only. The chosen side ignores the score (its
    /// template hard-codes 10); the rejected side requires score in 1..=9.
    pub fn render(&self, side: Side, score: u8, prompt: &Prompt) -> Result<String, DatagenError> {
        self.validate()?;
        match side {
            Side::Chosen => Ok(self
                .chosen_template
                .replacen(PROMPT_PLACEHOLDER, &prompt.text, 1)),
            Side::Rejected => {
                if !(1..=9).contains(&score) {
                    return Err(DatagenError::ScoreOutOfRange(score));
                }
                Ok(self
                    .rejected_template
                    .replacen(SCORE_PLACEHOLDER, &score.to_string(), 1)
                    .replacen(PROMPT_PLACEHOLDER, &prompt.text, 1))
            }
        }
    }
}

/// What to do when a cleaning pattern matches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleAction {
    /// Remove the match from the start of the text.
    Strip,
    /// Discard the whole response.
    Reject,
}

/// On-disk form of one cleaning rule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CleaningRuleSpec {
    pub id: String,
    pub pattern: String,
    pub action: RuleAction,
}

#[derive(Clone, Debug)]
struct CompiledRule {
    id: String,
    regex: Regex,
    action: RuleAction,
}

/// A response rejected by cleaning, with the id of the matching rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CleaningRejection {
    pub rule_id: String,
}

/// Ordered cleaning rules. Strip rules remove matches anchored at the start
/// of the text; reject rules discard the response when they match anywhere.
/// Rules are applied to a fixpoint, which makes cleaning idempotent.
#[derive(Clone, Debug)]
pub struct CleaningRuleSet {
    rules: Vec<CompiledRule>,
}

impl CleaningRuleSet {
    pub fn from_specs(specs: Vec<CleaningRuleSpec>) -> Result<Self, DatagenError> {
        let mut rules = Vec::with_capacity(specs.len());
        for spec in specs {
            let regex = Regex::new(&spec.pattern).map_err(|source| DatagenError::BadRule {
                id: spec.id.clone(),
                source,
            })?;
            rules.push(CompiledRule {
                id: spec.id,
                regex,
                action: spec.action,
            });
        }
        Ok(CleaningRuleSet { rules })
    }

    /// The shipped rules: strip acknowledgment/score preambles from the
    /// start of a response, and reject responses that are preamble only.
    pub fn default_rules() -> Self {
        CleaningRuleSet::from_specs(Self::default_specs()).expect("default rules compile")
    }

    pub fn default_specs() -> Vec<CleaningRuleSpec> {
        vec![
            CleaningRuleSpec {
                id: "ack-score-preamble".into(),
                pattern: r"(?i)^\s*(?:okay|ok|sure|certainly|alright|of course)?[,!.\s]*here(?: is|'s) (?:a|the|my|your) \d{1,2}[\s-]?score (?:answer|response)\s*[:.!\-]*\s*".into(),
                action: RuleAction::Strip,
            },
            CleaningRuleSpec {
                id: "score-answer-follows".into(),
                pattern: r"(?i)^\s*the \d{1,2}[\s-]?score (?:answer|response) (?:is as follows|follows|is)\s*[:.!\-]*\s*".into(),
                action: RuleAction::Strip,
            },
            CleaningRuleSpec {
                id: "preamble-only".into(),
                pattern: r"^\s*$".into(),
                action: RuleAction::Reject,
            },
        ]
    }

    pub fn load(path: &Path) -> Result<Self, DatagenError> {
        let raw = std::fs::read_to_string(path).map_err(|source| DatagenError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let specs: Vec<CleaningRuleSpec> =
            serde_json::from_str(&raw).map_err(|source| DatagenError::Type(TypeError::Parse {
                path: path.display().to_string(),
                source,
            }))?;
        CleaningRuleSet::from_specs(specs)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatagenError> {
        let specs: Vec<CleaningRuleSpec> = self
            .rules
            .iter()
            .map(|r| CleaningRuleSpec {
                id: r.id.clone(),
                pattern: r.regex.as_str().to_string(),
                action: r.action,
            })
            .collect();
        let body = serde_json::to_string_pretty(&specs).expect("rules serialize");
        std::fs::write(path, body + "\n").map_err(|source| DatagenError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Cleans a raw response. Returns the cleaned text, or the id of the
    /// rule that rejected it.
    pub fn clean(&self, raw: &str) -> Result<String, CleaningRejection> {
        let mut text = raw.to_string();
        loop {
            let mut changed = false;
            for rule in &self.rules {
                match rule.action {
                    RuleAction::Strip => loop {
                        match rule.regex.find(&text) {
                            Some(m) if m.start() == 0 && m.end() > 0 => {
                                text = text[m.end()..].to_string();
                                changed = true;
                            }
                            _ => break,
                        }
                    },
                    RuleAction::Reject => {
                        if rule.regex.is_match(&text) {
                            return Err(CleaningRejection {
                                rule_id: rule.id.clone(),
                            });
                        }
                    }
                }
            }
            if !changed {
                return Ok(text);
            }
        }
    }
}

/// Maps a verbalized prefix score 1..=10 to a conditioning reward. Identity
/// by default, so "10 out of 10" conditions on r = 10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreRewardMap {
    rewards: Vec<f64>,
}

impl Default for ScoreRewardMap {
    fn default() -> Self {
        ScoreRewardMap {
            rewards: (1..=10).map(f64::from).collect(),
        }
    }
}

impl ScoreRewardMap {
    pub fn new(rewards: Vec<f64>, r_max: f64) -> Result<Self, DatagenError> {
        if rewards.len() != 10 {
            return Err(DatagenError::BadScoreMap {
                value: rewards.len() as f64,
                r_max,
            });
        }
        for &value in &rewards {
            if !(0.0..=r_max).contains(&value) {
                return Err(DatagenError::BadScoreMap { value, r_max });
            }
        }
        Ok(ScoreRewardMap { rewards })
    }

    pub fn reward_for(&self, score: u8) -> Result<f64, DatagenError> {
        if !(1..=10).contains(&score) {
            return Err(DatagenError::ScoreOutOfRange(score));
        }
        Ok(self.rewards[score as usize - 1])
    }
}

/// Exact backend: samples the score-conditioned tilt of a frozen tabular
/// policy over an enumerable response space.
#[derive(Clone, Debug)]
pub struct ExactBackend {
    pub policy: TabularPolicy,
    pub oracle: RewardOracle,
    pub space: ResponseSpace,
    pub gamma: f64,
    pub alpha: f64,
    pub score_rewards: ScoreRewardMap,
}

/// Where generated responses come from.
#[derive(Clone, Debug)]
pub enum GenerationBackend {
    Exact(ExactBackend),
    Http(HttpBackend),
}

impl GenerationBackend {
    pub fn is_exact(&self) -> bool {
        matches!(self, GenerationBackend::Exact(_))
    }
}

/// One raw response for a prompt at a conditioning score.
///
/// Exact backend: a draw from the conditional policy at the mapped reward;
/// the template is not consulted because the conditioning is mathematical.
/// Http backend: one chat-completions request with the rendered prefix and
/// prompt as the user message; the rng is unused.
pub fn generate_response(
    backend: &GenerationBackend,
    template: &PrefixTemplate,
    prompt: &Prompt,
    score: u8,
    rng: &mut ChaCha12Rng,
) -> Result<String, DatagenError> {
    if !(1..=10).contains(&score) {
        return Err(DatagenError::ScoreOutOfRange(score));
    }
    match backend {
        GenerationBackend::Exact(exact) => {
            let r = exact.score_rewards.reward_for(score)?;
            let cond = ConditionalPolicy::new(
                &exact.policy,
                &exact.oracle,
                &exact.space,
                r,
                exact.gamma,
                exact.alpha,
            )?;
            let index = cond.sample(&prompt.id, rng)?;
            Ok(exact
                .space
                .get(index)
                .expect("sampled index in space")
                .to_string())
        }
        GenerationBackend::Http(http) => {
            let side = if score == CHOSEN_SCORE {
                Side::Chosen
            } else {
                Side::Rejected
            };
            let message = template.render(side, score, prompt)?;
            http.complete(&message)
        }
    }
}

/// Why a prompt produced no pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SkipReason {
    Cleaning { side: Side, rule_id: String },
    Duplicate,
}

/// Result of trying to build one pair.
#[derive(Clone, Debug)]
pub enum PairOutcome {
    Pair(PreferencePair),
    Skipped(SkipReason),
}

/// Generates and cleans one chosen/rejected pair. The chosen side draws
/// first from the prompt's rng substream, then the rejected side. Pairs are
/// skipped when either side is rejected by cleaning or when the cleaned
/// sides coincide (their preference margin would be identically zero).
pub fn generate_pair(
    backend: &GenerationBackend,
    template: &PrefixTemplate,
    rules: &CleaningRuleSet,
    prompt: &Prompt,
    rejected_score: u8,
    iteration: usize,
    rng: &mut ChaCha12Rng,
) -> Result<PairOutcome, DatagenError> {
    if !(1..=9).contains(&rejected_score) {
        return Err(DatagenError::ScoreOutOfRange(rejected_score));
    }
    let raw_chosen = generate_response(backend, template, prompt, CHOSEN_SCORE, rng)?;
    let raw_rejected = generate_response(backend, template, prompt, rejected_score, rng)?;
    let chosen = match rules.clean(&raw_chosen) {
        Ok(text) => text,
        Err(rejection) => {
            return Ok(PairOutcome::Skipped(SkipReason::Cleaning {
                side: Side::Chosen,
                rule_id: rejection.rule_id,
            }))
        }
    };
    let rejected = match rules.clean(&raw_rejected) {
        Ok(text) => text,
        Err(rejection) => {
            return Ok(PairOutcome::Skipped(SkipReason::Cleaning {
                side: Side::Rejected,
                rule_id: rejection.rule_id,
            }))
        }
    };
    if chosen == rejected {
        return Ok(PairOutcome::Skipped(SkipReason::Duplicate));
    }
    let pair = PreferencePair::new(
        prompt.id.clone(),
        prompt.text.clone(),
        chosen,
        rejected,
        CHOSEN_SCORE,
        rejected_score,
        iteration,
    )?;
    Ok(PairOutcome::Pair(pair))
}

/// Builds one iteration's dataset: one `generate_pair` per prompt at the
/// schedule's rejected score, written as JSONL sorted by prompt id via an
/// atomic temp-file rename. Each prompt draws from a substream derived from
/// (master seed, iteration, prompt id), so results do not depend on
/// completion order.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    backend: &GenerationBackend,
    template: &PrefixTemplate,
    rules: &CleaningRuleSet,
    prompts: &PromptSet,
    schedule: &ScoreSchedule,
    iteration: usize,
    master_seed: u64,
    out_path: &Path,
) -> Result<DatasetSummary, DatagenError> {
    let rejected_score =
        schedule
            .score_for(iteration)
            .ok_or(DatagenError::IterationOutOfSchedule {
                iteration,
                len: schedule.len(),
            })?;

    let mut sorted: Vec<&Prompt> = prompts.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let outcomes: Vec<(PromptId, Result<PairOutcome, DatagenError>)> = match backend {
        GenerationBackend::Exact(_) => sorted
            .iter()
            .map(|prompt| {
                let mut rng = prompt_rng(master_seed, iteration, &prompt.id);
                let outcome = generate_pair(
                    backend,
                    template,
                    rules,
                    prompt,
                    rejected_score,
                    iteration,
                    &mut rng,
                );
                (prompt.id.clone(), outcome)
            })
            .collect(),
        GenerationBackend::Http(http) => http::generate_all(
            http,
            backend,
            template,
            rules,
            &sorted,
            rejected_score,
            iteration,
            master_seed,
        ),
    };

    let mut failures: Vec<(PromptId, String)> = Vec::new();
    let mut by_prompt: HashMap<PromptId, PairOutcome> = HashMap::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                by_prompt.insert(id, o);
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    if !failures.is_empty() {
        let details = failures
            .iter()
            .map(|(id, msg)| format!("{id}: {msg}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(DatagenError::Aggregated {
            count: failures.len(),
            details,
        });
    }

    let mut summary = DatasetSummary {
        iteration,
        rejected_score,
        prompts_total: prompts.len(),
        ..DatasetSummary::default()
    };

    let parent = out_path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(|source| DatagenError::Io {
        path: parent.display().to_string(),
        source,
    })?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|source| DatagenError::Io {
        path: parent.display().to_string(),
        source,
    })?;
    for prompt in &sorted {
        match by_prompt.remove(&prompt.id).expect("outcome per prompt") {
            PairOutcome::Pair(pair) => {
                let line = serde_json::to_string(&pair).expect("pair serializes");
                writeln!(tmp, "{line}").map_err(|source| DatagenError::Io {
                    path: out_path.display().to_string(),
                    source,
                })?;
                summary.pairs_written += 1;
            }
            PairOutcome::Skipped(SkipReason::Cleaning { .. }) => summary.skipped_cleaning += 1,
            PairOutcome::Skipped(SkipReason::Duplicate) => summary.skipped_duplicate += 1,
        }
    }
    tmp.flush().map_err(|source| DatagenError::Io {
        path: out_path.display().to_string(),
        source,
    })?;
    tmp.persist(out_path).map_err(|e| DatagenError::Io {
        path: out_path.display().to_string(),
        source: e.error,
    })?;
    Ok(summary)
}

pub(crate) fn prompt_rng(master_seed: u64, iteration: usize, id: &PromptId) -> ChaCha12Rng {
    seeds::derive_rng(
        master_seed,
        &["datagen", &iteration.to_string(), id.as_str()],
    )
}
