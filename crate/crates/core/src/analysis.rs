//! Analysis experiments over finished runs: the prefix-score sweep, the
//! chosen/rejected reward trend across iterations, the arithmetic-control
//! ablation, and the inference-with-chosen-prefix comparison. Reports
//! export as RFC-4180 CSV.

use std::path::Path;

use thiserror::Error;

use crate::datagen::CleaningRuleSet;
use crate::oracle::{OracleError, RewardOracle};
use crate::policy::{
    expected_reward, greedy_reward, ConditionalPolicy, PolicyError, ResponseDist, TabularPolicy,
};
use crate::seeds;
use crate::trainer::{self, TrainConfig, TrainerError, TrainerInputs};
use crate::types::{load_pairs, PromptSet, ResponseSpace, RunManifest, ScoreSchedule, TypeError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("manifest has no dataset for iteration {iteration} at {path}")]
    MissingDataset { iteration: usize, path: String },
    #[error("ablation configs must differ only in schedule")]
    ConfigMismatch,
    #[error("samples_per_score must be >= 1")]
    NoSamples,
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error at {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// A report that knows how to lay itself out as CSV rows.
pub trait CsvExport {
    fn csv_header() -> &'static [&'static str];
    fn csv_rows(&self) -> Vec<Vec<String>>;
}

/// Writes a report as RFC-4180 CSV (CRLF, header row, deterministic order).
pub fn export_csv<T: CsvExport>(report: &T, path: &Path) -> Result<(), AnalysisError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)
        .map_err(|source| AnalysisError::Csv {
            path: path.display().to_string(),
            source,
        })?;
    writer
        .write_record(T::csv_header())
        .map_err(|source| AnalysisError::Csv {
            path: path.display().to_string(),
            source,
        })?;
    for row in report.csv_rows() {
        writer
            .write_record(&row)
            .map_err(|source| AnalysisError::Csv {
                path: path.display().to_string(),
                source,
            })?;
    }
    writer.flush().map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// One prefix score's row in the sweep: the exact enumeration-based
/// expectation next to the sampled estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub score: u8,
    pub exact_expected_reward: f64,
    pub sampled_mean: f64,
    pub sampled_std: f64,
    pub n: usize,
}

/// Mean oracle reward of responses generated at each prefix score 1..=10.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl CsvExport for SweepReport {
    fn csv_header() -> &'static [&'static str] {
        &["score", "exact_expected_reward", "sampled_mean", "sampled_std", "n"]
    }
    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.score.to_string(),
                    r.exact_expected_reward.to_string(),
                    r.sampled_mean.to_string(),
                    r.sampled_std.to_string(),
                    r.n.to_string(),
                ]
            })
            .collect()
    }
}

/// For each score s in 1..=10, the exact expected oracle reward under the
/// conditional policy at r = s, plus a seeded sampled estimate with
/// `samples_per_score` draws per prompt.
#[allow(clippy::too_many_arguments)]
pub fn prefix_sweep(
    reference: &TabularPolicy,
    oracle: &RewardOracle,
    prompts: &PromptSet,
    space: &ResponseSpace,
    gamma: f64,
    alpha: f64,
    samples_per_score: usize,
    seed: u64,
) -> Result<SweepReport, AnalysisError> {
    if samples_per_score == 0 {
        return Err(AnalysisError::NoSamples);
    }
    let mut rows = Vec::with_capacity(10);
    for score in 1..=10u8 {
        let cond =
            ConditionalPolicy::new(reference, oracle, space, score as f64, gamma, alpha)?;
        let exact = expected_reward(&cond, oracle, prompts, space)?;
        let mut samples = Vec::with_capacity(samples_per_score * prompts.len());
        for prompt in prompts.iter() {
            let mut rng = seeds::derive_rng(
                seed,
                &["sweep", &score.to_string(), prompt.id.as_str()],
            );
            let rewards = oracle.reward_row(&prompt.id, space)?;
            for _ in 0..samples_per_score {
                let y = cond.sample(&prompt.id, &mut rng)?;
                samples.push(rewards[y]);
            }
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        rows.push(SweepRow {
            score,
            exact_expected_reward: exact,
            sampled_mean: mean,
            sampled_std: var.sqrt(),
            n,
        });
    }
    Ok(SweepReport { rows })
}

/// One iteration's chosen/rejected reward means.
#[derive(Clone, Debug, PartialEq)]
pub struct GapTrendRow {
    pub iteration: usize,
    pub mean_chosen_reward: f64,
    pub mean_rejected_reward: f64,
    pub gap: f64,
}

/// Reward trend across iterations, recomputed from the persisted datasets.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GapTrend {
    pub rows: Vec<GapTrendRow>,
}

impl CsvExport for GapTrend {
    fn csv_header() -> &'static [&'static str] {
        &["iteration", "mean_chosen_reward", "mean_rejected_reward", "gap"]
    }
    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.iteration.to_string(),
                    r.mean_chosen_reward.to_string(),
                    r.mean_rejected_reward.to_string(),
                    r.gap.to_string(),
                ]
            })
            .collect()
    }
}

/// Rescores every persisted iteration dataset with the oracle.
pub fn gap_trend(
    manifest: &RunManifest,
    run_dir: &Path,
    oracle: &RewardOracle,
) -> Result<GapTrend, AnalysisError> {
    let mut rows = Vec::with_capacity(manifest.iterations.len());
    for record in &manifest.iterations {
        let path = run_dir.join(&record.dataset_path);
        if !path.exists() {
            return Err(AnalysisError::MissingDataset {
                iteration: record.iteration,
                path: path.display().to_string(),
            });
        }
        let pairs = load_pairs(&path)?;
        if pairs.is_empty() {
            return Err(AnalysisError::MissingDataset {
                iteration: record.iteration,
                path: path.display().to_string(),
            });
        }
        let mut chosen = 0.0;
        let mut rejected = 0.0;
        for pair in &pairs {
            chosen += oracle.score(&pair.prompt_id, &pair.chosen)?;
            rejected += oracle.score(&pair.prompt_id, &pair.rejected)?;
        }
        let n = pairs.len() as f64;
        let mean_chosen_reward = chosen / n;
        let mean_rejected_reward = rejected / n;
        rows.push(GapTrendRow {
            iteration: record.iteration,
            mean_chosen_reward,
            mean_rejected_reward,
            gap: mean_chosen_reward - mean_rejected_reward,
        });
    }
    Ok(GapTrend { rows })
}

/// One paired seed in the ablation. Wins are decided on greedy reward;
/// expected rewards ride along for finer-grained comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub curriculum_greedy_reward: f64,
    pub fixed_greedy_reward: f64,
    pub curriculum_expected_reward: f64,
    pub fixed_expected_reward: f64,
    pub curriculum_wins: bool,
}

/// Curriculum vs fixed-schedule comparison over paired seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub mean_curriculum: f64,
    pub mean_fixed: f64,
    pub win_fraction: f64,
    pub low_confidence: bool,
}

impl CsvExport for AblationReport {
    fn csv_header() -> &'static [&'static str] {
        &[
            "seed",
            "curriculum_greedy_reward",
            "fixed_greedy_reward",
            "curriculum_expected_reward",
            "fixed_expected_reward",
            "curriculum_wins",
        ]
    }
    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.seed.to_string(),
                    r.curriculum_greedy_reward.to_string(),
                    r.fixed_greedy_reward.to_string(),
                    r.curriculum_expected_reward.to_string(),
                    r.fixed_expected_reward.to_string(),
                    r.curriculum_wins.to_string(),
                ]
            })
            .collect()
    }
}

fn final_rewards(
    config: &TrainConfig,
    inputs: TrainerInputs<'_>,
    pretrained: &TabularPolicy,
) -> Result<(f64, f64), AnalysisError> {
    let dir = tempfile::tempdir().map_err(|source| AnalysisError::Io {
        path: "tempdir".into(),
        source,
    })?;
    let manifest = trainer::run(
        config,
        inputs,
        pretrained,
        dir.path(),
        serde_json::json!({"analysis": "ablation"}),
    )?;
    let last = manifest.iterations.last();
    Ok((
        last.map(|r| r.metrics.greedy_reward).unwrap_or(f64::NAN),
        last.map(|r| r.metrics.policy_expected_reward)
            .unwrap_or(f64::NAN),
    ))
}

/// Runs both pipelines over the seed set and reports per-arm final greedy
/// reward plus the curriculum arm's win fraction (ties count as wins). The
/// two configs must differ only in schedule.
pub fn ablation_arithmetic_control(
    curriculum: &TrainConfig,
    fixed: &TrainConfig,
    inputs: TrainerInputs<'_>,
    pretrained: &TabularPolicy,
    seeds: &[u64],
) -> Result<AblationReport, AnalysisError> {
    let mut normalized = fixed.clone();
    normalized.schedule = curriculum.schedule.clone();
    if &normalized != curriculum {
        return Err(AnalysisError::ConfigMismatch);
    }
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg_a = curriculum.clone();
        cfg_a.seed = seed;
        let mut cfg_b = fixed.clone();
        cfg_b.seed = seed;
        let (a_greedy, a_expected) = final_rewards(&cfg_a, inputs, pretrained)?;
        let (b_greedy, b_expected) = final_rewards(&cfg_b, inputs, pretrained)?;
        rows.push(AblationRow {
            seed,
            curriculum_greedy_reward: a_greedy,
            fixed_greedy_reward: b_greedy,
            curriculum_expected_reward: a_expected,
            fixed_expected_reward: b_expected,
            curriculum_wins: a_greedy >= b_greedy,
        });
    }
    let n = rows.len();
    let mean_curriculum = rows.iter().map(|r| r.curriculum_greedy_reward).sum::<f64>() / n as f64;
    let mean_fixed = rows.iter().map(|r| r.fixed_greedy_reward).sum::<f64>() / n as f64;
    let wins = rows.iter().filter(|r| r.curriculum_wins).count();
    Ok(AblationReport {
        rows,
        mean_curriculum,
        mean_fixed,
        win_fraction: wins as f64 / n as f64,
        low_confidence: n < 2,
    })
}

/// Comparison of plain reference sampling, score-10 conditional sampling
/// with cleaning, and the iteration-1 trained policy. Exact expectations
/// sit next to seeded sampled estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixEvalReport {
    pub ref_expected: f64,
    pub ref_sampled_mean: f64,
    pub prefix10_expected: f64,
    pub prefix10_sampled_mean: f64,
    pub prefix10_rejected_by_cleaning: usize,
    pub trained_iter1_expected: f64,
    pub trained_iter1_greedy: f64,
    pub n_samples: usize,
}

impl CsvExport for PrefixEvalReport {
    fn csv_header() -> &'static [&'static str] {
        &[
            "ref_expected",
            "ref_sampled_mean",
            "prefix10_expected",
            "prefix10_sampled_mean",
            "prefix10_rejected_by_cleaning",
            "trained_iter1_expected",
            "trained_iter1_greedy",
            "n_samples",
        ]
    }
    fn csv_rows(&self) -> Vec<Vec<String>> {
        vec![vec![
            self.ref_expected.to_string(),
            self.ref_sampled_mean.to_string(),
            self.prefix10_expected.to_string(),
            self.prefix10_sampled_mean.to_string(),
            self.prefix10_rejected_by_cleaning.to_string(),
            self.trained_iter1_expected.to_string(),
            self.trained_iter1_greedy.to_string(),
            self.n_samples.to_string(),
        ]]
    }
}

/// Arm (a): plain sampling from the reference. Arm (b): score-10
/// conditional sampling with cleaning applied (cleaning-rejected draws are
/// dropped from the mean). Arm (c): the policy after one training
/// iteration, evaluated in exact expectation and greedily.
#[allow(clippy::too_many_arguments)]
pub fn chosen_prefix_inference_eval(
    reference: &TabularPolicy,
    inputs: TrainerInputs<'_>,
    config: &TrainConfig,
    rules: &CleaningRuleSet,
    samples_per_prompt: usize,
    seed: u64,
) -> Result<PrefixEvalReport, AnalysisError> {
    if samples_per_prompt == 0 {
        return Err(AnalysisError::NoSamples);
    }
    let oracle = inputs.oracle;
    let prompts = inputs.prompts;
    let space = inputs.space;

    let ref_expected = expected_reward(reference, oracle, prompts, space)?;
    let cond = ConditionalPolicy::new(
        reference,
        oracle,
        space,
        oracle.r_max(),
        config.gamma,
        config.alpha,
    )?;
    let prefix10_expected = expected_reward(&cond, oracle, prompts, space)?;

    let mut ref_samples = Vec::new();
    let mut prefix_samples = Vec::new();
    let mut rejected_by_cleaning = 0usize;
    for prompt in prompts.iter() {
        let rewards = oracle.reward_row(&prompt.id, space)?;
        let mut rng = seeds::derive_rng(seed, &["prefix-eval", "ref", prompt.id.as_str()]);
        for _ in 0..samples_per_prompt {
            let y = reference.sample(&prompt.id, &mut rng)?;
            ref_samples.push(rewards[y]);
        }
        let mut rng = seeds::derive_rng(seed, &["prefix-eval", "cond", prompt.id.as_str()]);
        for _ in 0..samples_per_prompt {
            let y = cond.sample(&prompt.id, &mut rng)?;
            let text = space.get(y).expect("index in space");
            match rules.clean(text) {
                Ok(cleaned) => match oracle.score(&prompt.id, &cleaned) {
                    Ok(r) => prefix_samples.push(r),
                    // Cleaning changed the text out of the space; count it
                    // like a rejection rather than failing the arm.
                    Err(_) => rejected_by_cleaning += 1,
                },
                Err(_) => rejected_by_cleaning += 1,
            }
        }
    }
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };

    let mut iter1_config = config.clone();
    iter1_config.iterations = 1;
    iter1_config.schedule = ScoreSchedule::new(vec![
        config
            .schedule
            .score_for(1)
            .unwrap_or(3),
    ]);
    iter1_config.learning_rates = vec![config.learning_rates[0]];
    iter1_config.seed = seed;
    let dir = tempfile::tempdir().map_err(|source| AnalysisError::Io {
        path: "tempdir".into(),
        source,
    })?;
    // Arm (c) starts from the supplied reference, mirroring "the reference
    // model during the first round".
    let (trained, record) = trainer::run_iteration(reference, inputs, &iter1_config, 1, dir.path())?;
    let trained_iter1_expected = expected_reward(&trained, oracle, prompts, space)?;
    let trained_iter1_greedy = greedy_reward(&trained, oracle, prompts, space)?;
    let _ = record;

    Ok(PrefixEvalReport {
        ref_expected,
        ref_sampled_mean: mean(&ref_samples),
        prefix10_expected,
        prefix10_sampled_mean: mean(&prefix_samples),
        prefix10_rejected_by_cleaning: rejected_by_cleaning,
        trained_iter1_expected,
        trained_iter1_greedy,
        n_samples: samples_per_prompt * prompts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::StandardFixture;

    #[test]
    fn sweep_gamma_zero_is_flat_at_reference_reward() {
        let fixture = StandardFixture::new();
        let reference = fixture.pretrained();
        let report = prefix_sweep(
            &reference,
            &fixture.oracle,
            &fixture.prompts,
            &fixture.space,
            0.0,
            2.0,
            4,
            1,
        )
        .unwrap();
        let base = expected_reward(
            &reference,
            &fixture.oracle,
            &fixture.prompts,
            &fixture.space,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 10);
        for row in &report.rows {
            assert!((row.exact_expected_reward - base).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_exact_column_is_monotone_and_spans() {
        let fixture = StandardFixture::new();
        let reference = fixture.pretrained();
        let report = prefix_sweep(
            &reference,
            &fixture.oracle,
            &fixture.prompts,
            &fixture.space,
            1.0,
            2.0,
            8,
            3,
        )
        .unwrap();
        for w in report.rows.windows(2) {
            assert!(w[1].exact_expected_reward >= w[0].exact_expected_reward - 1e-12);
        }
        assert!(
            report.rows[9].exact_expected_reward > report.rows[0].exact_expected_reward
        );
    }

    #[test]
    fn sweep_sampled_mean_within_four_sigma_of_exact() {
        let fixture = StandardFixture::new();
        let reference = fixture.pretrained();
        let report = prefix_sweep(
            &reference,
            &fixture.oracle,
            &fixture.prompts,
            &fixture.space,
            1.0,
            2.0,
            200,
            7,
        )
        .unwrap();
        for row in &report.rows {
            let sigma = row.sampled_std / (row.n as f64).sqrt();
            assert!(
                (row.sampled_mean - row.exact_expected_reward).abs() <= 4.0 * sigma.max(1e-9),
                "score {}: sampled {} exact {} sigma {}",
                row.score,
                row.sampled_mean,
                row.exact_expected_reward,
                sigma
            );
        }
    }

    #[test]
    fn export_csv_round_trips() {
        let report = SweepReport {
            rows: (1..=10)
                .map(|score| SweepRow {
                    score,
                    exact_expected_reward: score as f64 * 0.75,
                    sampled_mean: score as f64 * 0.7,
                    sampled_std: 0.25,
                    n: 40,
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        export_csv(&report, &path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let headers: Vec<String> = reader
            .headers()
            .unwrap()
            .iter()
            .map(String::from)
            .collect();
        assert_eq!(headers, SweepReport::csv_header());
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[2][0], *"3");
        assert_eq!(rows[2][1].parse::<f64>().unwrap(), 2.25);
    }

    #[test]
    fn empty_trend_exports_header_only() {
        let trend = GapTrend::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trend.csv");
        export_csv(&trend, &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body, "iteration,mean_chosen_reward,mean_rejected_reward,gap\r\n");
    }
}
