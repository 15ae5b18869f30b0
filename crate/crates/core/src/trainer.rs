//! The full training pipeline: initialization (supervised fine-tuning, then
//! offline preference optimization), followed by M self-rewarding iterations.
//! Each iteration freezes the current policy as the reference, generates a
//! preference dataset from it at the schedule's rejected score, trains the
//! policy against that dataset, and snapshots the result.
//!
//! Training is plain gradient descent with optional momentum and a per-step
//! halving backoff, so the recorded loss trace is non-increasing. Everything
//! is deterministic given the master seed on the exact backend.

use std::path::Path;

use thiserror::Error;

use crate::datagen::{
    build_dataset, CleaningRuleSet, DatagenError, ExactBackend, GenerationBackend,
    PrefixTemplate, ScoreRewardMap,
};
use crate::losses::{dpo_loss, sft_loss, simpo_loss, LossError, LossReport};
use crate::oracle::{OracleError, RewardOracle};
use crate::policy::{
    expected_reward, greedy_reward, load_snapshot, save_snapshot, PolicyError, SnapshotError,
    TabularPolicy,
};
use crate::types::{
    load_pairs, validate_schedule, DatasetSummary, InitRecord, IterationMetrics,
    IterationRecord, OfflinePair, PromptSet, ResponseSpace, RunManifest, ScheduleError,
    ScoreSchedule, SftExample, TypeError,
};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("loss diverged to a non-finite value at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("iteration {iteration} produced an empty dataset (all prompts skipped)")]
    EmptyDataset { iteration: usize },
    #[error("final loss {final_loss} exceeds initial loss {initial_loss} in iteration {iteration}")]
    LossIncreased {
        iteration: usize,
        initial_loss: f64,
        final_loss: f64,
    },
    #[error("manifest at {path} does not match the current config; refusing to resume")]
    ResumeConfigMismatch { path: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// Which pairwise loss a stage trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossChoice {
    Dpo,
    Simpo,
}

/// Pipeline hyperparameters. The learning-rate list has one entry per
/// iteration and decreases across iterations. The defaults are sized for
/// tabular logits; full-scale LLM fine-tuning runs this same shape at
/// rates around 1e-7 to 1e-8, which would not move a tabular policy at
/// all.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub schedule: ScoreSchedule,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub init_loss: LossChoice,
    pub iteration_loss: LossChoice,
    pub target_margin: f64,
    pub learning_rates: Vec<f64>,
    pub sft_learning_rate: f64,
    pub offline_learning_rate: f64,
    pub steps_per_iteration: usize,
    pub offline_steps: usize,
    pub sft_max_steps: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3,
            schedule: ScoreSchedule::default(),
            beta: 0.1,
            gamma: 1.0,
            alpha: 2.0,
            init_loss: LossChoice::Dpo,
            iteration_loss: LossChoice::Dpo,
            target_margin: 0.5,
            learning_rates: vec![0.5, 0.25, 0.1],
            sft_learning_rate: 0.5,
            offline_learning_rate: 0.5,
            steps_per_iteration: 500,
            offline_steps: 300,
            sft_max_steps: 10_000,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.iterations == 0 {
            return Err(TrainerError::InvalidConfig("iterations must be >= 1".into()));
        }
        validate_schedule(&self.schedule, self.iterations)?;
        if self.learning_rates.len() != self.iterations {
            return Err(TrainerError::InvalidConfig(format!(
                "{} learning rates for {} iterations",
                self.learning_rates.len(),
                self.iterations
            )));
        }
        if self.learning_rates.iter().any(|&lr| lr <= 0.0) {
            return Err(TrainerError::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        if self.beta <= 0.0 {
            return Err(TrainerError::InvalidConfig("beta must be positive".into()));
        }
        if self.gamma < 0.0 {
            return Err(TrainerError::InvalidConfig("gamma must be >= 0".into()));
        }
        if self.alpha <= 0.0 {
            return Err(TrainerError::InvalidConfig("alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainerError::InvalidConfig(
                "momentum must be in [0, 1)".into(),
            ));
        }
        if self.sft_learning_rate <= 0.0 || self.offline_learning_rate <= 0.0 {
            return Err(TrainerError::InvalidConfig(
                "stage learning rates must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a run consumes besides the config.
#[derive(Clone, Copy)]
pub struct TrainerInputs<'a> {
    pub prompts: &'a PromptSet,
    pub space: &'a ResponseSpace,
    pub oracle: &'a RewardOracle,
    pub sft_data: &'a [SftExample],
    pub offline_pairs: &'a [OfflinePair],
    pub template: &'a PrefixTemplate,
    pub rules: &'a CleaningRuleSet,
}

/// Options for one gradient-descent stage.
struct DescentOptions {
    learning_rate: f64,
    max_steps: usize,
    momentum: f64,
    /// Stop when the loss improves by less than `tol` over `window` steps.
    convergence: Option<(usize, f64)>,
}

struct DescentTrace {
    losses: Vec<f64>,
    final_value: f64,
}

/// Gradient descent with per-step halving backoff: a step that would
/// increase the loss is retried at half the rate; if no decrease is found
/// the step is skipped. The recorded trace is therefore non-increasing.
fn descend<F>(
    policy: &mut TabularPolicy,
    loss_fn: F,
    opts: &DescentOptions,
) -> Result<DescentTrace, TrainerError>
where
    F: Fn(&TabularPolicy) -> Result<LossReport, LossError>,
{
    const MAX_HALVINGS: u32 = 40;
    let mut velocity = policy.zeros_like();
    let mut report = loss_fn(policy)?;
    if !report.value.is_finite() {
        return Err(TrainerError::NonFiniteLoss { step: 0 });
    }
    let mut losses = vec![report.value];
    for step in 0..opts.max_steps {
        for (v_row, g_row) in velocity.iter_mut().zip(report.gradient.iter()) {
            for (v, g) in v_row.iter_mut().zip(g_row.iter()) {
                *v = opts.momentum * *v + g;
            }
        }
        let current = report.value;
        let mut rate = opts.learning_rate;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut candidate = policy.clone();
            candidate.apply_step(&velocity, rate)?;
            let next = loss_fn(&candidate)?;
            if !next.value.is_finite() {
                return Err(TrainerError::NonFiniteLoss { step: step + 1 });
            }
            if next.value <= current {
                accepted = Some((candidate, next));
                break;
            }
            rate /= 2.0;
        }
        match accepted {
            Some((candidate, next)) => {
                *policy = candidate;
                report = next;
            }
            None => {
                // No productive step at any rate; the trace stays flat.
                for row in velocity.iter_mut() {
                    row.fill(0.0);
                }
                report = loss_fn(policy)?;
            }
        }
        losses.push(report.value);
        if let Some((window, tol)) = opts.convergence {
            if losses.len() > window {
                let past = losses[losses.len() - 1 - window];
                if (past - report.value).abs() < tol {
                    break;
                }
            }
        }
    }
    Ok(DescentTrace {
        final_value: *losses.last().expect("at least the initial loss"),
        losses,
    })
}

fn stage_loss<'a>(
    choice: LossChoice,
    reference: &'a TabularPolicy,
    space: &'a ResponseSpace,
    beta: f64,
    target_margin: f64,
) -> impl Fn(&TabularPolicy, &[crate::types::PreferencePair]) -> Result<LossReport, LossError> + 'a
{
    move |policy, pairs| match choice {
        LossChoice::Dpo => dpo_loss(policy, reference, space, pairs, beta),
        LossChoice::Simpo => simpo_loss(policy, space, pairs, beta, target_margin),
    }
}

/// Result of the initialization stage.
pub struct InitOutcome {
    pub policy: TabularPolicy,
    pub sft_final_loss: f64,
    pub sft_trace: Vec<f64>,
    pub offline_final_loss: Option<f64>,
}

/// SFT to convergence (loss change below 1e-9 over 100 steps, capped), then
/// offline preference optimization with the SFT policy frozen as the
/// reference. With no offline pairs the second step is a no-op.
pub fn init_stage(
    pretrained: &TabularPolicy,
    inputs: TrainerInputs<'_>,
    config: &TrainConfig,
) -> Result<InitOutcome, TrainerError> {
    let mut policy = pretrained.clone();
    let sft = descend(
        &mut policy,
        |p| sft_loss(p, inputs.space, inputs.sft_data),
        &DescentOptions {
            learning_rate: config.sft_learning_rate,
            max_steps: config.sft_max_steps,
            momentum: config.momentum,
            convergence: Some((100, 1e-9)),
        },
    )?;

    let offline_final_loss = if inputs.offline_pairs.is_empty() {
        None
    } else {
        let reference = policy.clone();
        let trace = match config.init_loss {
            LossChoice::Dpo => descend(
                &mut policy,
                |p| dpo_loss(p, &reference, inputs.space, inputs.offline_pairs, config.beta),
                &DescentOptions {
                    learning_rate: config.offline_learning_rate,
                    max_steps: config.offline_steps,
                    momentum: config.momentum,
                    convergence: None,
                },
            )?,
            LossChoice::Simpo => descend(
                &mut policy,
                |p| {
                    simpo_loss(
                        p,
                        inputs.space,
                        inputs.offline_pairs,
                        config.beta,
                        config.target_margin,
                    )
                },
                &DescentOptions {
                    learning_rate: config.offline_learning_rate,
                    max_steps: config.offline_steps,
                    momentum: config.momentum,
                    convergence: None,
                },
            )?,
        };
        Some(trace.final_value)
    };

    Ok(InitOutcome {
        policy,
        sft_final_loss: sft.final_value,
        sft_trace: sft.losses,
        offline_final_loss,
    })
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// One self-rewarding iteration against an explicit reference policy.
/// Returns the trained policy and its record. `iteration` is 1-based.
pub fn run_iteration(
    reference: &TabularPolicy,
    inputs: TrainerInputs<'_>,
    config: &TrainConfig,
    iteration: usize,
    run_dir: &Path,
) -> Result<(TabularPolicy, IterationRecord), TrainerError> {
    let iter_dir = run_dir.join(format!("iter{iteration}"));
    std::fs::create_dir_all(&iter_dir).map_err(|source| TrainerError::Io {
        path: iter_dir.display().to_string(),
        source,
    })?;
    let dataset_path = iter_dir.join("dataset.jsonl");

    let backend = GenerationBackend::Exact(ExactBackend {
        policy: reference.clone(),
        oracle: inputs.oracle.clone(),
        space: inputs.space.clone(),
        gamma: config.gamma,
        alpha: config.alpha,
        score_rewards: ScoreRewardMap::default(),
    });
    let summary = build_dataset(
        &backend,
        inputs.template,
        inputs.rules,
        inputs.prompts,
        &config.schedule,
        iteration,
        config.seed,
        &dataset_path,
    )?;
    if summary.pairs_written == 0 {
        return Err(TrainerError::EmptyDataset { iteration });
    }
    let pairs = load_pairs(&dataset_path)?;

    let mut policy = reference.clone();
    let loss_fn = stage_loss(
        config.iteration_loss,
        reference,
        inputs.space,
        config.beta,
        config.target_margin,
    );
    let trace = descend(
        &mut policy,
        |p| loss_fn(p, &pairs),
        &DescentOptions {
            learning_rate: config.learning_rates[iteration - 1],
            max_steps: config.steps_per_iteration,
            momentum: config.momentum,
            convergence: None,
        },
    )?;
    let initial_loss = trace.losses[0];
    let final_loss = trace.final_value;
    if final_loss > initial_loss {
        return Err(TrainerError::LossIncreased {
            iteration,
            initial_loss,
            final_loss,
        });
    }

    let snapshot_path = iter_dir.join("policy.snapshot");
    let snapshot_hash = save_snapshot(&policy, &snapshot_path)?;

    let metrics = iteration_metrics(&policy, inputs, &summary, &pairs, final_loss)?;
    let record = IterationRecord {
        iteration,
        rejected_score: summary.rejected_score,
        dataset_path: relative(&dataset_path, run_dir),
        summary,
        initial_loss,
        final_loss,
        snapshot_path: relative(&snapshot_path, run_dir),
        snapshot_hash,
        metrics,
    };
    Ok((policy, record))
}

fn iteration_metrics(
    policy: &TabularPolicy,
    inputs: TrainerInputs<'_>,
    summary: &DatasetSummary,
    pairs: &[crate::types::PreferencePair],
    final_loss: f64,
) -> Result<IterationMetrics, TrainerError> {
    let mut chosen_total = 0.0;
    let mut rejected_total = 0.0;
    for pair in pairs {
        chosen_total += inputs.oracle.score(&pair.prompt_id, &pair.chosen)?;
        rejected_total += inputs.oracle.score(&pair.prompt_id, &pair.rejected)?;
    }
    let n = pairs.len() as f64;
    let mean_chosen_reward = chosen_total / n;
    let mean_rejected_reward = rejected_total / n;
    let _ = summary;
    Ok(IterationMetrics {
        mean_chosen_reward,
        mean_rejected_reward,
        gap: mean_chosen_reward - mean_rejected_reward,
        policy_expected_reward: expected_reward(policy, inputs.oracle, inputs.prompts, inputs.space)?,
        greedy_reward: greedy_reward(policy, inputs.oracle, inputs.prompts, inputs.space)?,
        dpo_loss_final: final_loss,
    })
}

fn write_metrics_csv(manifest: &RunManifest, run_dir: &Path) -> Result<(), TrainerError> {
    let path = run_dir.join("metrics.csv");
    let mut body = String::from(
        "iteration,mean_chosen_reward,mean_rejected_reward,gap,policy_expected_reward,dpo_loss_final\r\n",
    );
    for record in &manifest.iterations {
        let m = &record.metrics;
        body.push_str(&format!(
            "{},{},{},{},{},{}\r\n",
            record.iteration,
            m.mean_chosen_reward,
            m.mean_rejected_reward,
            m.gap,
            m.policy_expected_reward,
            m.dpo_loss_final
        ));
    }
    std::fs::write(&path, body).map_err(|source| TrainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn persist(manifest: &RunManifest, run_dir: &Path) -> Result<(), TrainerError> {
    manifest.save(&run_dir.join("manifest.json"))?;
    write_metrics_csv(manifest, run_dir)?;
    Ok(())
}

fn init_and_record(
    pretrained: &TabularPolicy,
    inputs: TrainerInputs<'_>,
    config: &TrainConfig,
    run_dir: &Path,
) -> Result<(TabularPolicy, InitRecord), TrainerError> {
    let init_dir = run_dir.join("init");
    std::fs::create_dir_all(&init_dir).map_err(|source| TrainerError::Io {
        path: init_dir.display().to_string(),
        source,
    })?;
    let outcome = init_stage(pretrained, inputs, config)?;
    let snapshot_path = init_dir.join("policy.snapshot");
    let snapshot_hash = save_snapshot(&outcome.policy, &snapshot_path)?;
    let record = InitRecord {
        snapshot_path: relative(&snapshot_path, run_dir),
        snapshot_hash,
        sft_final_loss: outcome.sft_final_loss,
        offline_final_loss: outcome.offline_final_loss,
        policy_expected_reward: expected_reward(
            &outcome.policy,
            inputs.oracle,
            inputs.prompts,
            inputs.space,
        )?,
        greedy_reward: greedy_reward(&outcome.policy, inputs.oracle, inputs.prompts, inputs.space)?,
    };
    Ok((outcome.policy, record))
}

/// The full pipeline: init, then M iterations with reference chaining. The
/// manifest (and metrics CSV) persists after init and after every
/// iteration, so an aborted run leaves a resumable partial manifest.
pub fn run(
    config: &TrainConfig,
    inputs: TrainerInputs<'_>,
    pretrained: &TabularPolicy,
    run_dir: &Path,
    config_snapshot: serde_json::Value,
) -> Result<RunManifest, TrainerError> {
    run_partial(config, inputs, pretrained, run_dir, config_snapshot, None)
}

/// `run`, optionally stopping after `stop_after` iterations (used to
/// exercise resume).
pub fn run_partial(
    config: &TrainConfig,
    inputs: TrainerInputs<'_>,
    pretrained: &TabularPolicy,
    run_dir: &Path,
    config_snapshot: serde_json::Value,
    stop_after: Option<usize>,
) -> Result<RunManifest, TrainerError> {
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|source| TrainerError::Io {
        path: run_dir.display().to_string(),
        source,
    })?;
    let mut manifest = RunManifest::new(config.seed, config_snapshot);
    let (mut policy, init_record) = init_and_record(pretrained, inputs, config, run_dir)?;
    manifest.init = Some(init_record);
    persist(&manifest, run_dir)?;
    advance(
        config, inputs, &mut policy, run_dir, &mut manifest, stop_after,
    )?;
    Ok(manifest)
}

/// Continues a partial run: verifies the stored config snapshot matches,
/// reloads the last completed snapshot, and runs the remaining iterations.
pub fn resume(
    config: &TrainConfig,
    inputs: TrainerInputs<'_>,
    run_dir: &Path,
    config_snapshot: serde_json::Value,
) -> Result<RunManifest, TrainerError> {
    config.validate()?;
    let manifest_path = run_dir.join("manifest.json");
    let mut manifest = RunManifest::load(&manifest_path)?;
    if manifest.config != config_snapshot || manifest.master_seed != config.seed {
        return Err(TrainerError::ResumeConfigMismatch {
            path: manifest_path.display().to_string(),
        });
    }
    let last_snapshot = match manifest.iterations.last() {
        Some(record) => run_dir.join(&record.snapshot_path),
        None => match &manifest.init {
            Some(init) => run_dir.join(&init.snapshot_path),
            None => {
                return Err(TrainerError::ResumeConfigMismatch {
                    path: manifest_path.display().to_string(),
                })
            }
        },
    };
    let (mut policy, _) = load_snapshot(&last_snapshot)?;
    advance(config, inputs, &mut policy, run_dir, &mut manifest, None)?;
    Ok(manifest)
}

fn advance(
    config: &TrainConfig,
    inputs: TrainerInputs<'_>,
    policy: &mut TabularPolicy,
    run_dir: &Path,
    manifest: &mut RunManifest,
    stop_after: Option<usize>,
) -> Result<(), TrainerError> {
    let start = manifest.iterations.len() + 1;
    for iteration in start..=config.iterations {
        if let Some(limit) = stop_after {
            if iteration > limit {
                break;
            }
        }
        let (next, record) = match run_iteration(policy, inputs, config, iteration, run_dir) {
            Ok(pair) => pair,
            Err(e) => {
                // Keep the partial manifest on disk for inspection/resume.
                persist(manifest, run_dir)?;
                return Err(e);
            }
        };
        *policy = next;
        manifest.iterations.push(record);
        persist(manifest, run_dir)?;
    }
    Ok(())
}
