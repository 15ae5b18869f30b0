//! Operator surface for the laboratory. Subcommands drive initialization,
//! dataset generation, full runs, and the analysis exports; everything on
//! stdout is machine-parseable JSON lines, prose goes to stderr.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 backend or
//! environment error, 4 internal invariant violation.

mod config;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use config::{BackendConfig, Config, LoadedInputs};
use selfpref::analysis::{self, AnalysisError};
use selfpref::datagen::{
    build_dataset, DatagenError, ExactBackend, GenerationBackend, ScoreRewardMap,
};
use selfpref::fixture::StandardFixture;
use selfpref::policy::{load_snapshot, TabularPolicy};
use selfpref::trainer::{self, TrainerError};
use selfpref::types::{RunManifest, ScoreSchedule};

const EXIT_USAGE: i32 = 2;
const EXIT_BACKEND: i32 = 3;
const EXIT_INTERNAL: i32 = 4;

#[derive(Parser)]
#[command(
    name = "selfpref",
    version,
    about = "Score-conditioned self-rewarding preference optimization lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    Exact,
    Http,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AnalysisKind {
    Sweep,
    Trend,
    Ablation,
    PrefixEval,
}

#[derive(Subcommand)]
enum Command {
    /// Run the initialization stage (SFT then offline preference
    /// optimization) and write the init snapshot plus a manifest stub.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate one iteration's preference dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        iteration: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        backend: Option<BackendChoice>,
    },
    /// Run the full pipeline: init plus all iterations.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        backend: Option<BackendChoice>,
        /// Continue a partial run in --out from its last completed iteration.
        #[arg(long)]
        resume: bool,
    },
    /// Recompute analysis reports from a finished run's manifest.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        which: AnalysisKind,
        /// Second config for the ablation comparison (fixed-schedule arm).
        #[arg(long)]
        config2: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the built-in fixture (prompts, responses, oracle, seed data,
    /// cleaning rules, config) into a directory.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

enum CliError {
    Usage(String),
    Backend(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Backend(m) | CliError::Internal(m) => m,
        }
    }
}

fn datagen_is_environmental(e: &DatagenError) -> bool {
    matches!(
        e,
        DatagenError::Http { .. }
            | DatagenError::Timeout(_)
            | DatagenError::Transport(_)
            | DatagenError::MissingAuthToken { .. }
            | DatagenError::Aggregated { .. }
            | DatagenError::BadCompletion(_)
            | DatagenError::Io { .. }
    )
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        if datagen_is_environmental(&e) {
            CliError::Backend(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match &e {
            TrainerError::InvalidConfig(_)
            | TrainerError::Schedule(_)
            | TrainerError::ResumeConfigMismatch { .. } => CliError::Usage(e.to_string()),
            TrainerError::Datagen(d) if datagen_is_environmental(d) => {
                CliError::Backend(e.to_string())
            }
            TrainerError::Datagen(_) => CliError::Usage(e.to_string()),
            TrainerError::Io { .. } => CliError::Backend(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::MissingDataset { .. }
            | AnalysisError::ConfigMismatch
            | AnalysisError::NoSamples => CliError::Usage(e.to_string()),
            AnalysisError::Io { .. } | AnalysisError::Csv { .. } => {
                CliError::Backend(e.to_string())
            }
            AnalysisError::Trainer(t) => CliError::from(t),
            other => CliError::Internal(other.to_string()),
        }
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<Config, CliError> {
    let mut config = Config::load(path).map_err(CliError::Usage)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    Ok(config)
}

fn load_inputs(config: &Config) -> Result<LoadedInputs, CliError> {
    config.load_inputs().map_err(CliError::Usage)
}

fn default_out_dir(seed: u64) -> PathBuf {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("run").join(format!("{ts}-{seed}"))
}

fn trainer_inputs(inputs: &LoadedInputs) -> selfpref::TrainerInputs<'_> {
    selfpref::TrainerInputs {
        prompts: &inputs.prompts,
        space: &inputs.space,
        oracle: &inputs.oracle,
        sft_data: &inputs.sft_data,
        offline_pairs: &inputs.offline_pairs,
        template: &inputs.template,
        rules: &inputs.rules,
    }
}

fn apply_backend_override(
    config: &mut Config,
    choice: Option<BackendChoice>,
) -> Result<(), CliError> {
    match choice {
        None => Ok(()),
        Some(BackendChoice::Exact) => {
            config.backend = BackendConfig::Exact;
            Ok(())
        }
        Some(BackendChoice::Http) => match &config.backend {
            BackendConfig::Http { .. } => Ok(()),
            BackendConfig::Exact => Err(CliError::Usage(
                "--backend http requires http backend parameters in the config".into(),
            )),
        },
    }
}

fn cmd_init(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let config = load_config(config_path, seed)?;
    let inputs = load_inputs(&config)?;
    let out_dir = out.unwrap_or_else(|| default_out_dir(config.seed));
    let train = config.to_train_config();
    let pretrained = TabularPolicy::uniform(&inputs.prompts, inputs.space.len());
    let manifest = trainer::run_partial(
        &train,
        trainer_inputs(&inputs),
        &pretrained,
        &out_dir,
        config.snapshot(),
        Some(0),
    )?;
    let init = manifest.init.as_ref().expect("init record");
    emit(json!({
        "event": "init_complete",
        "out": out_dir.display().to_string(),
        "snapshot": init.snapshot_path,
        "sft_final_loss": init.sft_final_loss,
        "offline_final_loss": init.offline_final_loss,
        "greedy_reward": init.greedy_reward,
        "policy_expected_reward": init.policy_expected_reward,
    }));
    Ok(())
}

fn reference_snapshot_path(out_dir: &Path, iteration: usize) -> PathBuf {
    if iteration <= 1 {
        out_dir.join("init").join("policy.snapshot")
    } else {
        out_dir
            .join(format!("iter{}", iteration - 1))
            .join("policy.snapshot")
    }
}

fn cmd_generate(
    config_path: &Path,
    iteration: usize,
    out: Option<PathBuf>,
    seed: Option<u64>,
    backend_choice: Option<BackendChoice>,
) -> Result<(), CliError> {
    let mut config = load_config(config_path, seed)?;
    apply_backend_override(&mut config, backend_choice)?;
    if iteration == 0 || iteration > config.iterations {
        return Err(CliError::Usage(format!(
            "iteration {iteration} outside 1..={}",
            config.iterations
        )));
    }
    let inputs = load_inputs(&config)?;
    let out_dir = out.unwrap_or_else(|| default_out_dir(config.seed));

    let backend = match &config.backend {
        BackendConfig::Exact => {
            let snapshot = reference_snapshot_path(&out_dir, iteration);
            if !snapshot.exists() {
                return Err(CliError::Usage(format!(
                    "reference snapshot {} not found; run `selfpref init` or `selfpref run` first",
                    snapshot.display()
                )));
            }
            let (policy, _) =
                load_snapshot(&snapshot).map_err(|e| CliError::Internal(e.to_string()))?;
            GenerationBackend::Exact(ExactBackend {
                policy,
                oracle: inputs.oracle.clone(),
                space: inputs.space.clone(),
                gamma: config.gamma,
                alpha: config.alpha,
                score_rewards: ScoreRewardMap::default(),
            })
        }
        BackendConfig::Http { .. } => {
            GenerationBackend::Http(config.http_backend().expect("http params present"))
        }
    };

    let dataset_path = out_dir
        .join(format!("iter{iteration}"))
        .join("dataset.jsonl");
    let schedule = ScoreSchedule::new(config.schedule.clone());
    let summary = build_dataset(
        &backend,
        &inputs.template,
        &inputs.rules,
        &inputs.prompts,
        &schedule,
        iteration,
        config.seed,
        &dataset_path,
    )?;
    emit(json!({
        "event": "dataset_written",
        "path": dataset_path.display().to_string(),
        "iteration": summary.iteration,
        "rejected_score": summary.rejected_score,
        "prompts_total": summary.prompts_total,
        "pairs_written": summary.pairs_written,
        "skipped_cleaning": summary.skipped_cleaning,
        "skipped_duplicate": summary.skipped_duplicate,
    }));
    Ok(())
}

fn cmd_run(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    backend_choice: Option<BackendChoice>,
    resume: bool,
) -> Result<(), CliError> {
    let mut config = load_config(config_path, seed)?;
    apply_backend_override(&mut config, backend_choice)?;
    if matches!(config.backend, BackendConfig::Http { .. }) {
        return Err(CliError::Usage(
            "the full pipeline trains tabular policies and needs the exact backend; \
             use `selfpref generate --backend http` for endpoint-driven dataset production"
                .into(),
        ));
    }
    let inputs = load_inputs(&config)?;
    let train = config.to_train_config();

    if resume {
        let out_dir = out.ok_or_else(|| {
            CliError::Usage("--resume needs --out pointing at the partial run".into())
        })?;
        let manifest = trainer::resume(
            &train,
            trainer_inputs(&inputs),
            &out_dir,
            config.snapshot(),
        )?;
        emit(json!({
            "event": "run_complete",
            "resumed": true,
            "out": out_dir.display().to_string(),
            "iterations": manifest.iterations.len(),
        }));
    } else {
        let out_dir = out.unwrap_or_else(|| default_out_dir(config.seed));
        let pretrained = TabularPolicy::uniform(&inputs.prompts, inputs.space.len());
        let manifest = trainer::run(
            &train,
            trainer_inputs(&inputs),
            &pretrained,
            &out_dir,
            config.snapshot(),
        )?;
        emit(json!({
            "event": "run_complete",
            "resumed": false,
            "out": out_dir.display().to_string(),
            "iterations": manifest.iterations.len(),
        }));
    }
    Ok(())
}

fn cmd_analyze(
    manifest_path: &Path,
    which: AnalysisKind,
    config2: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let manifest = RunManifest::load(manifest_path).map_err(|e| CliError::Usage(e.to_string()))?;
    let run_dir = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let config: Config = serde_json::from_value(manifest.config.clone())
        .map_err(|e| CliError::Usage(format!("manifest config does not parse: {e}")))?;
    let inputs = load_inputs(&config)?;
    let out_dir = out.unwrap_or_else(|| run_dir.join("analysis"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Backend(format!("cannot create {}: {e}", out_dir.display())))?;

    let init = manifest
        .init
        .as_ref()
        .ok_or_else(|| CliError::Usage("manifest has no init record".into()))?;

    match which {
        AnalysisKind::Sweep => {
            let (reference, _) = load_snapshot(&run_dir.join(&init.snapshot_path))
                .map_err(|e| CliError::Internal(e.to_string()))?;
            let report = analysis::prefix_sweep(
                &reference,
                &inputs.oracle,
                &inputs.prompts,
                &inputs.space,
                config.gamma,
                config.alpha,
                config.analysis.samples_per_score,
                config.seed,
            )?;
            let path = out_dir.join("sweep.csv");
            analysis::export_csv(&report, &path)?;
            emit(json!({
                "event": "analysis_complete",
                "which": "sweep",
                "csv": path.display().to_string(),
            }));
        }
        AnalysisKind::Trend => {
            let report = analysis::gap_trend(&manifest, &run_dir, &inputs.oracle)?;
            let path = out_dir.join("trend.csv");
            analysis::export_csv(&report, &path)?;
            emit(json!({
                "event": "analysis_complete",
                "which": "trend",
                "csv": path.display().to_string(),
            }));
        }
        AnalysisKind::Ablation => {
            let fixed_path = config2.ok_or_else(|| {
                CliError::Usage("ablation needs --config2 with the fixed-schedule arm".into())
            })?;
            let fixed = Config::load(&fixed_path).map_err(CliError::Usage)?;
            let seeds: Vec<u64> = (0..config.analysis.seeds as u64)
                .map(|i| config.seed.wrapping_add(i))
                .collect();
            let pretrained = TabularPolicy::uniform(&inputs.prompts, inputs.space.len());
            let report = analysis::ablation_arithmetic_control(
                &config.to_train_config(),
                &fixed.to_train_config(),
                trainer_inputs(&inputs),
                &pretrained,
                &seeds,
            )?;
            let path = out_dir.join("ablation.csv");
            analysis::export_csv(&report, &path)?;
            emit(json!({
                "event": "analysis_complete",
                "which": "ablation",
                "csv": path.display().to_string(),
                "mean_curriculum": report.mean_curriculum,
                "mean_fixed": report.mean_fixed,
                "win_fraction": report.win_fraction,
                "meets_threshold": report.win_fraction >= config.analysis.control_majority,
                "low_confidence": report.low_confidence,
            }));
        }
        AnalysisKind::PrefixEval => {
            let (reference, _) = load_snapshot(&run_dir.join(&init.snapshot_path))
                .map_err(|e| CliError::Internal(e.to_string()))?;
            let report = analysis::chosen_prefix_inference_eval(
                &reference,
                trainer_inputs(&inputs),
                &config.to_train_config(),
                &inputs.rules,
                config.analysis.samples_per_score,
                config.seed,
            )?;
            let path = out_dir.join("prefix_eval.csv");
            analysis::export_csv(&report, &path)?;
            emit(json!({
                "event": "analysis_complete",
                "which": "prefix-eval",
                "csv": path.display().to_string(),
                "ref_expected": report.ref_expected,
                "prefix10_expected": report.prefix10_expected,
                "trained_iter1_expected": report.trained_iter1_expected,
            }));
        }
    }
    Ok(())
}

fn cmd_fixture(out: &Path, seed: u64) -> Result<(), CliError> {
    let fixture = StandardFixture::new();
    fixture
        .write_files(out)
        .map_err(|e| CliError::Backend(e.to_string()))?;
    let config = config::fixture_config(seed);
    let raw = serde_json::to_string_pretty(&config).expect("config serializes");
    let path = out.join("config.json");
    std::fs::write(&path, raw + "\n")
        .map_err(|e| CliError::Backend(format!("cannot write {}: {e}", path.display())))?;
    emit(json!({
        "event": "fixture_written",
        "out": out.display().to_string(),
        "config": path.display().to_string(),
    }));
    Ok(())
}

fn run_command(command: Command) -> Result<(), CliError> {
    match command {
        Command::Init { config, out, seed } => cmd_init(&config, out, seed),
        Command::Generate {
            config,
            iteration,
            out,
            seed,
            backend,
        } => cmd_generate(&config, iteration, out, seed, backend),
        Command::Run {
            config,
            out,
            seed,
            backend,
            resume,
        } => cmd_run(&config, out, seed, backend, resume),
        Command::Analyze {
            manifest,
            which,
            config2,
            out,
        } => cmd_analyze(&manifest, which, config2, out),
        Command::Fixture { out, seed } => cmd_fixture(&out, seed),
    }
}

fn main() {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}
