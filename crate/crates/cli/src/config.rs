//! Strict run configuration: a single JSON file with every hyperparameter,
//! backend selection, and input path. Unknown keys are rejected so typos in
//! experiment configs fail loudly. Relative paths resolve against the config
//! file's directory; the resolved config is what lands in the manifest.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use selfpref::datagen::{CleaningRuleSet, HttpBackend, PrefixTemplate, RetryPolicy};
use selfpref::oracle::RewardOracle;
use selfpref::trainer::{LossChoice, TrainConfig};
use selfpref::types::{
    load_offline_pairs, load_sft_data, OfflinePair, PromptSet, ResponseSpace, ScoreSchedule,
    SftExample,
};

fn default_iterations() -> usize {
    3
}
fn default_schedule() -> Vec<u8> {
    vec![3, 5, 7]
}
fn default_beta() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    2.0
}
fn default_loss() -> LossChoice {
    LossChoice::Dpo
}
fn default_target_margin() -> f64 {
    0.5
}
fn default_learning_rates() -> Vec<f64> {
    vec![0.5, 0.25, 0.1]
}
fn default_stage_lr() -> f64 {
    0.5
}
fn default_steps_per_iteration() -> usize {
    500
}
fn default_offline_steps() -> usize {
    300
}
fn default_sft_max_steps() -> usize {
    10_000
}
fn default_r_max() -> f64 {
    10.0
}
fn default_http_temperature() -> f64 {
    0.7
}
fn default_max_tokens() -> u32 {
    512
}
fn default_max_concurrency() -> usize {
    8
}
fn default_retry_initial_delay_ms() -> u64 {
    1000
}
fn default_retry_max() -> u32 {
    5
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_samples_per_score() -> usize {
    200
}
fn default_narrowing_majority() -> f64 {
    0.9
}
fn default_control_majority() -> f64 {
    0.7
}
fn default_analysis_seeds() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Exact,
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "default_http_temperature")]
        temperature: f64,
        #[serde(default = "default_max_tokens")]
        max_tokens: u32,
        auth_env: String,
        #[serde(default = "default_max_concurrency")]
        max_concurrency: usize,
        #[serde(default = "default_retry_initial_delay_ms")]
        retry_initial_delay_ms: u64,
        #[serde(default = "default_retry_max")]
        retry_max: u32,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleKindConfig {
    Table,
    TargetMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKindConfig,
    pub path: String,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_samples_per_score")]
    pub samples_per_score: usize,
    #[serde(default = "default_narrowing_majority")]
    pub narrowing_majority: f64,
    #[serde(default = "default_control_majority")]
    pub control_majority: f64,
    #[serde(default = "default_analysis_seeds")]
    pub seeds: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            samples_per_score: default_samples_per_score(),
            narrowing_majority: default_narrowing_majority(),
            control_majority: default_control_majority(),
            seeds: default_analysis_seeds(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Vec<u8>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_loss")]
    pub init_loss: LossChoice,
    #[serde(default = "default_loss")]
    pub iteration_loss: LossChoice,
    #[serde(default = "default_target_margin")]
    pub target_margin: f64,
    #[serde(default = "default_learning_rates")]
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_stage_lr")]
    pub sft_learning_rate: f64,
    #[serde(default = "default_stage_lr")]
    pub offline_learning_rate: f64,
    #[serde(default = "default_steps_per_iteration")]
    pub steps_per_iteration: usize,
    #[serde(default = "default_offline_steps")]
    pub offline_steps: usize,
    #[serde(default = "default_sft_max_steps")]
    pub sft_max_steps: usize,
    #[serde(default)]
    pub momentum: f64,
    pub backend: BackendConfig,
    pub prompts: String,
    pub responses: String,
    pub oracle: OracleConfig,
    pub sft_data: String,
    pub offline_pairs: String,
    #[serde(default)]
    pub cleaning_rules: Option<String>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// A config plus everything loaded through it.
pub struct LoadedInputs {
    pub prompts: PromptSet,
    pub space: ResponseSpace,
    pub oracle: RewardOracle,
    pub sft_data: Vec<SftExample>,
    pub offline_pairs: Vec<OfflinePair>,
    pub template: PrefixTemplate,
    pub rules: CleaningRuleSet,
}

impl Config {
    /// Parses strictly and resolves relative paths against the config file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut config: Config = serde_json::from_str(&raw)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut String| {
            let candidate = PathBuf::from(&p);
            if candidate.is_relative() {
                *p = base.join(candidate).to_string_lossy().into_owned();
            }
        };
        resolve(&mut self.prompts);
        resolve(&mut self.responses);
        resolve(&mut self.oracle.path);
        resolve(&mut self.sft_data);
        resolve(&mut self.offline_pairs);
        if let Some(rules) = &mut self.cleaning_rules {
            resolve(rules);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.to_train_config().validate().map_err(|e| e.to_string())
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            schedule: ScoreSchedule::new(self.schedule.clone()),
            beta: self.beta,
            gamma: self.gamma,
            alpha: self.alpha,
            init_loss: self.init_loss,
            iteration_loss: self.iteration_loss,
            target_margin: self.target_margin,
            learning_rates: self.learning_rates.clone(),
            sft_learning_rate: self.sft_learning_rate,
            offline_learning_rate: self.offline_learning_rate,
            steps_per_iteration: self.steps_per_iteration,
            offline_steps: self.offline_steps,
            sft_max_steps: self.sft_max_steps,
            momentum: self.momentum,
            seed: self.seed,
        }
    }

    pub fn http_backend(&self) -> Option<HttpBackend> {
        match &self.backend {
            BackendConfig::Exact => None,
            BackendConfig::Http {
                endpoint,
                model,
                temperature,
                max_tokens,
                auth_env,
                max_concurrency,
                retry_initial_delay_ms,
                retry_max,
                timeout_secs,
            } => Some(HttpBackend {
                endpoint: endpoint.clone(),
                model: model.clone(),
                temperature: *temperature,
                max_tokens: *max_tokens,
                auth_env: auth_env.clone(),
                max_concurrency: *max_concurrency,
                retry: RetryPolicy {
                    max_retries: *retry_max,
                    initial_delay_ms: *retry_initial_delay_ms,
                },
                timeout: Duration::from_secs(*timeout_secs),
            }),
        }
    }

    /// Loads every input file the config names.
    pub fn load_inputs(&self) -> Result<LoadedInputs, String> {
        let prompts = PromptSet::load(Path::new(&self.prompts)).map_err(|e| e.to_string())?;
        let space = ResponseSpace::load(Path::new(&self.responses)).map_err(|e| e.to_string())?;
        let oracle = match self.oracle.kind {
            OracleKindConfig::Table => {
                RewardOracle::load_table(Path::new(&self.oracle.path), &space, self.oracle.r_max)
            }
            OracleKindConfig::TargetMatch => {
                RewardOracle::load_target_match(Path::new(&self.oracle.path), self.oracle.r_max)
            }
        }
        .map_err(|e| e.to_string())?;
        let sft_data = load_sft_data(Path::new(&self.sft_data)).map_err(|e| e.to_string())?;
        let offline_pairs =
            load_offline_pairs(Path::new(&self.offline_pairs)).map_err(|e| e.to_string())?;
        let rules = match &self.cleaning_rules {
            Some(path) => CleaningRuleSet::load(Path::new(path)).map_err(|e| e.to_string())?,
            None => CleaningRuleSet::default_rules(),
        };
        Ok(LoadedInputs {
            prompts,
            space,
            oracle,
            sft_data,
            offline_pairs,
            template: PrefixTemplate::default(),
            rules,
        })
    }

    /// The resolved-config snapshot that goes into the manifest.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// The config written by `selfpref fixture`, pointing at the fixture files
/// by bare name (they live beside it).
pub fn fixture_config(seed: u64) -> Config {
    Config {
        seed,
        iterations: 3,
        schedule: vec![3, 5, 7],
        beta: default_beta(),
        gamma: default_gamma(),
        alpha: default_alpha(),
        init_loss: LossChoice::Dpo,
        iteration_loss: LossChoice::Dpo,
        target_margin: default_target_margin(),
        learning_rates: default_learning_rates(),
        sft_learning_rate: default_stage_lr(),
        offline_learning_rate: default_stage_lr(),
        steps_per_iteration: 2000,
        offline_steps: default_offline_steps(),
        sft_max_steps: 600,
        momentum: 0.0,
        backend: BackendConfig::Exact,
        prompts: "prompts.json".into(),
        responses: "responses.json".into(),
        oracle: OracleConfig {
            kind: OracleKindConfig::Table,
            path: "oracle.json".into(),
            r_max: 10.0,
        },
        sft_data: "sft.json".into(),
        offline_pairs: "offline_pairs.jsonl".into(),
        cleaning_rules: Some("cleaning_rules.json".into()),
        analysis: AnalysisConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let raw = r#"{
            "seed": 1,
            "backend": {"kind": "exact"},
            "prompts": "p.json",
            "responses": "r.json",
            "oracle": {"kind": "table", "path": "o.json"},
            "sft_data": "s.json",
            "offline_pairs": "op.jsonl",
            "betaa": 0.2
        }"#;
        let err = serde_json::from_str::<Config>(raw).unwrap_err();
        assert!(err.to_string().contains("betaa"));
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let raw = r#"{
            "seed": 7,
            "backend": {"kind": "exact"},
            "prompts": "p.json",
            "responses": "r.json",
            "oracle": {"kind": "table", "path": "o.json"},
            "sft_data": "s.json",
            "offline_pairs": "op.jsonl"
        }"#;
        let config: Config = serde_json::from_str(raw).unwrap();
        assert_eq!(config.iterations, 3);
        assert_eq!(config.schedule, vec![3, 5, 7]);
        assert_eq!(config.beta, 0.1);
        assert_eq!(config.learning_rates, vec![0.5, 0.25, 0.1]);
        assert!(config.to_train_config().validate().is_ok());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let nested = dir.path().join("exp");
        std::fs::create_dir_all(&nested).unwrap();
        let config_path = nested.join("config.json");
        std::fs::write(
            &config_path,
            r#"{
                "seed": 1,
                "backend": {"kind": "exact"},
                "prompts": "prompts.json",
                "responses": "responses.json",
                "oracle": {"kind": "table", "path": "oracle.json"},
                "sft_data": "sft.json",
                "offline_pairs": "offline_pairs.jsonl"
            }"#,
        )
        .unwrap();
        let config = Config::load(&config_path).unwrap();
        assert_eq!(
            PathBuf::from(&config.prompts),
            nested.join("prompts.json")
        );
    }
}
