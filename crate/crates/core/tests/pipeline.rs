//! Integration tests across datagen, trainer, and analysis: statistical
//! invariants of generated datasets, the http backend against a local stub,
//! and the analysis operations end to end on the built-in fixtures.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use selfpref::analysis;
use selfpref::datagen::{
    build_dataset, generate_response, CleaningRuleSet, ExactBackend, GenerationBackend,
    HttpBackend, PrefixTemplate, RetryPolicy, ScoreRewardMap,
};
use selfpref::fixture::{wide_fixture, StandardFixture};
use selfpref::policy::TabularPolicy;
use selfpref::trainer;
use selfpref::types::{load_pairs, ScoreSchedule};

const TOKEN_ENV: &str = "SELFPREF_PIPELINE_TEST_TOKEN";

/// Minimal scripted chat-completions stub. Responds per request with the
/// scripted status; 200 responses echo a completion derived from the
/// request body so chosen/rejected calls differ.
struct Stub {
    addr: String,
    requests: Arc<Mutex<Vec<String>>>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl Stub {
    fn spawn(statuses: Vec<u16>) -> Stub {
        let server = tiny_http::Server::http("127.0.0.1:0").expect("bind stub");
        let addr = format!("http://{}", server.server_addr());
        let requests: Arc<Mutex<Vec<String>>> = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            let mut served = 0usize;
            loop {
                let request = match server.recv_timeout(Duration::from_millis(500)) {
                    Ok(Some(r)) => r,
                    _ => break,
                };
                let mut body = String::new();
                let mut request = request;
                let _ = request.as_reader().read_to_string(&mut body);
                seen.lock().unwrap().push(body.clone());
                let status = statuses
                    .get(served)
                    .copied()
                    .or_else(|| statuses.last().copied())
                    .unwrap_or(200);
                served += 1;
                let payload = if status == 200 {
                    let score = if body.contains("10 out of 10") {
                        "10"
                    } else {
                        "low"
                    };
                    format!(
                        "{{\"choices\":[{{\"message\":{{\"role\":\"assistant\",\"content\":\"stub completion {score}\"}}}}]}}"
                    )
                } else {
                    "{\"error\":\"scripted failure\"}".to_string()
                };
                let response = tiny_http::Response::from_string(payload)
                    .with_status_code(status)
                    .with_header(
                        tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                            .unwrap(),
                    );
                let _ = request.respond(response);
            }
        });
        Stub {
            addr,
            requests,
            handle: Some(handle),
        }
    }

    fn backend(&self) -> HttpBackend {
        HttpBackend {
            endpoint: self.addr.clone(),
            model: "stub-model".into(),
            temperature: 0.7,
            max_tokens: 64,
            auth_env: TOKEN_ENV.into(),
            max_concurrency: 4,
            retry: RetryPolicy {
                max_retries: 5,
                initial_delay_ms: 20,
            },
            timeout: Duration::from_secs(5),
        }
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

#[test]
fn exact_backend_reward_gap_clears_four_sigma_over_512_pairs() {
    let (prompts, space, oracle) = wide_fixture(512);
    let backend = GenerationBackend::Exact(ExactBackend {
        policy: TabularPolicy::uniform(&prompts, space.len()),
        oracle: oracle.clone(),
        space: space.clone(),
        gamma: 1.0,
        alpha: 2.0,
        score_rewards: ScoreRewardMap::default(),
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.jsonl");
    let summary = build_dataset(
        &backend,
        &PrefixTemplate::default(),
        &CleaningRuleSet::default_rules(),
        &prompts,
        &ScoreSchedule::new(vec![3]),
        1,
        99,
        &path,
    )
    .unwrap();
    assert!(summary.pairs_written >= 500, "{summary:?}");

    let pairs = load_pairs(&path).unwrap();
    let chosen: Vec<f64> = pairs
        .iter()
        .map(|p| oracle.score(&p.prompt_id, &p.chosen).unwrap())
        .collect();
    let rejected: Vec<f64> = pairs
        .iter()
        .map(|p| oracle.score(&p.prompt_id, &p.rejected).unwrap())
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (mc, mr) = (mean(&chosen), mean(&rejected));
    let n = pairs.len() as f64;
    let sigma_diff = (var(&chosen, mc) / n + var(&rejected, mr) / n).sqrt();
    assert!(
        mc - mr > 4.0 * sigma_diff,
        "gap {} not above 4 sigma {}",
        mc - mr,
        sigma_diff
    );
}

#[test]
fn generated_files_satisfy_pair_invariants_and_sorted_order() {
    let (prompts, space, oracle) = wide_fixture(64);
    let backend = GenerationBackend::Exact(ExactBackend {
        policy: TabularPolicy::uniform(&prompts, space.len()),
        oracle,
        space,
        gamma: 1.0,
        alpha: 2.0,
        score_rewards: ScoreRewardMap::default(),
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    build_dataset(
        &backend,
        &PrefixTemplate::default(),
        &CleaningRuleSet::default_rules(),
        &prompts,
        &ScoreSchedule::new(vec![5]),
        1,
        3,
        &path,
    )
    .unwrap();
    let raw = std::fs::read_to_string(&path).unwrap();
    let mut previous_id = String::new();
    for line in raw.lines() {
        assert!(line.starts_with("{\"prompt_id\":"), "key order: {line}");
        let pair: selfpref::PreferencePair = serde_json::from_str(line).unwrap();
        pair.validate().unwrap();
        assert!(pair.prompt_id.to_string() > previous_id, "sorted by id");
        previous_id = pair.prompt_id.to_string();
    }
}

#[test]
fn http_backend_returns_stub_completion_verbatim() {
    std::env::set_var(TOKEN_ENV, "sk-test-do-not-log");
    let stub = Stub::spawn(vec![200]);
    let fixture = StandardFixture::new();
    let backend = GenerationBackend::Http(stub.backend());
    let prompt = fixture.prompts.iter().next().unwrap();
    let mut rng = selfpref::seeds::derive_rng(0, &["t"]);
    let text =
        generate_response(&backend, &fixture.template, prompt, 10, &mut rng).unwrap();
    assert_eq!(text, "stub completion 10");
    let low = generate_response(&backend, &fixture.template, prompt, 3, &mut rng).unwrap();
    assert_eq!(low, "stub completion low");
    // The rendered prefix went over the wire in the chat-completions shape.
    let bodies = stub.requests.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["max_tokens"], 64);
    let content = body["messages"][0]["content"].as_str().unwrap();
    assert!(content.contains("a perfect score of 10 out of 10"));
    assert!(content.contains(&prompt.text));
    assert!(bodies[1].contains("a perfect score of 3 out of 10"));
}

#[test]
fn http_backend_builds_a_dataset_over_the_stub() {
    std::env::set_var(TOKEN_ENV, "sk-test-do-not-log");
    let stub = Stub::spawn(vec![200]);
    let fixture = StandardFixture::new();
    let backend = GenerationBackend::Http(stub.backend());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("http.jsonl");
    let summary = build_dataset(
        &backend,
        &fixture.template,
        &fixture.rules,
        &fixture.prompts,
        &ScoreSchedule::default(),
        1,
        0,
        &path,
    )
    .unwrap();
    assert_eq!(summary.pairs_written, 8);
    let pairs = load_pairs(&path).unwrap();
    for pair in &pairs {
        assert_eq!(pair.chosen, "stub completion 10");
        assert_eq!(pair.rejected, "stub completion low");
    }
}

#[test]
fn http_backend_retries_429_then_succeeds() {
    std::env::set_var(TOKEN_ENV, "sk-test-do-not-log");
    let stub = Stub::spawn(vec![429, 429, 200]);
    let backend = stub.backend();
    let started = std::time::Instant::now();
    let text = backend.complete("hello").unwrap();
    let elapsed = started.elapsed();
    assert_eq!(text, "stub completion low");
    assert_eq!(stub.requests.lock().unwrap().len(), 3);
    // Two backoffs: 20ms + 40ms.
    assert!(elapsed >= Duration::from_millis(60), "elapsed {elapsed:?}");
}

#[test]
fn http_backend_gives_up_after_max_retries() {
    std::env::set_var(TOKEN_ENV, "sk-test-do-not-log");
    let stub = Stub::spawn(vec![500]);
    let mut backend = stub.backend();
    backend.retry = RetryPolicy {
        max_retries: 2,
        initial_delay_ms: 5,
    };
    let err = backend.complete("hello").unwrap_err();
    assert!(matches!(
        err,
        selfpref::datagen::DatagenError::Http { status: 500, .. }
    ));
    assert_eq!(stub.requests.lock().unwrap().len(), 3);
}

#[test]
fn http_backend_does_not_retry_401() {
    std::env::set_var(TOKEN_ENV, "sk-test-do-not-log");
    let stub = Stub::spawn(vec![401]);
    let backend = stub.backend();
    let err = backend.complete("hello").unwrap_err();
    assert!(matches!(
        err,
        selfpref::datagen::DatagenError::Http { status: 401, .. }
    ));
    assert_eq!(stub.requests.lock().unwrap().len(), 1);
}

#[test]
fn missing_auth_env_is_a_clean_error() {
    let stub = Stub::spawn(vec![200]);
    let mut backend = stub.backend();
    backend.auth_env = "SELFPREF_DEFINITELY_UNSET_VAR".into();
    let err = backend.complete("hello").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("SELFPREF_DEFINITELY_UNSET_VAR"));
}

#[test]
fn gap_trend_single_iteration_manifest_has_one_row() {
    let fixture = StandardFixture::new();
    let mut config = fixture.train_config(3);
    config.iterations = 1;
    config.schedule = ScoreSchedule::new(vec![3]);
    config.learning_rates = vec![0.5];
    let dir = tempfile::tempdir().unwrap();
    let manifest = trainer::run(
        &config,
        fixture.inputs(),
        &fixture.pretrained(),
        dir.path(),
        serde_json::json!({}),
    )
    .unwrap();
    let trend = analysis::gap_trend(&manifest, dir.path(), &fixture.oracle).unwrap();
    assert_eq!(trend.rows.len(), 1);
    assert!(trend.rows[0].gap >= 0.0);
}

#[test]
fn fixed_schedule_control_arm_runs_without_narrowing_claims() {
    let fixture = StandardFixture::new();
    let mut config = fixture.train_config(4);
    config.schedule = ScoreSchedule::new(vec![3, 3, 3]);
    let dir = tempfile::tempdir().unwrap();
    let manifest = trainer::run(
        &config,
        fixture.inputs(),
        &fixture.pretrained(),
        dir.path(),
        serde_json::json!({}),
    )
    .unwrap();
    let trend = analysis::gap_trend(&manifest, dir.path(), &fixture.oracle).unwrap();
    assert_eq!(trend.rows.len(), 3);
    for row in &trend.rows {
        assert_eq!(
            manifest.iterations[row.iteration - 1].rejected_score,
            3
        );
    }
}

#[test]
fn ablation_identical_configs_produce_identical_results() {
    let fixture = StandardFixture::new();
    let mut config = fixture.train_config(0);
    config.steps_per_iteration = 300;
    let report = analysis::ablation_arithmetic_control(
        &config,
        &config.clone(),
        fixture.inputs(),
        &fixture.pretrained(),
        &[1, 2],
    )
    .unwrap();
    for row in &report.rows {
        assert_eq!(
            row.curriculum_greedy_reward.to_bits(),
            row.fixed_greedy_reward.to_bits()
        );
        assert!(row.curriculum_wins);
    }
    assert_eq!(report.win_fraction, 1.0);
    assert!(!report.low_confidence);
}

#[test]
fn ablation_single_seed_is_flagged_low_confidence() {
    let fixture = StandardFixture::new();
    let mut curriculum = fixture.train_config(0);
    curriculum.steps_per_iteration = 200;
    let mut fixed = curriculum.clone();
    fixed.schedule = ScoreSchedule::new(vec![3, 3, 3]);
    let report = analysis::ablation_arithmetic_control(
        &curriculum,
        &fixed,
        fixture.inputs(),
        &fixture.pretrained(),
        &[7],
    )
    .unwrap();
    assert!(report.low_confidence);
    assert_eq!(report.rows.len(), 1);
}

#[test]
fn ablation_rejects_configs_differing_beyond_schedule() {
    let fixture = StandardFixture::new();
    let curriculum = fixture.train_config(0);
    let mut fixed = curriculum.clone();
    fixed.schedule = ScoreSchedule::new(vec![3, 3, 3]);
    fixed.beta = 0.2;
    let err = analysis::ablation_arithmetic_control(
        &curriculum,
        &fixed,
        fixture.inputs(),
        &fixture.pretrained(),
        &[1],
    );
    assert!(matches!(err, Err(analysis::AnalysisError::ConfigMismatch)));
}

#[test]
fn prefix_eval_gamma_zero_equalizes_plain_and_conditioned_arms() {
    let fixture = StandardFixture::new();
    let mut config = fixture.train_config(5);
    config.gamma = 0.0;
    config.steps_per_iteration = 50;
    let reference = fixture.pretrained();
    let report = analysis::chosen_prefix_inference_eval(
        &reference,
        fixture.inputs(),
        &config,
        &fixture.rules,
        20,
        5,
    )
    .unwrap();
    assert!((report.ref_expected - report.prefix10_expected).abs() < 1e-12);
}

#[test]
fn prefix_eval_conditioning_beats_plain_sampling_exactly() {
    let fixture = StandardFixture::new();
    let config = fixture.train_config(6);
    let reference = fixture.pretrained();
    let report = analysis::chosen_prefix_inference_eval(
        &reference,
        fixture.inputs(),
        &config,
        &fixture.rules,
        20,
        6,
    )
    .unwrap();
    assert!(report.prefix10_expected >= report.ref_expected);
    assert!(report.prefix10_expected > report.ref_expected + 1.0);
}

// The exact backend's score-10 sampler is an oracle-informed exponential
// tilt, and iteration-1 training distills chosen samples drawn from that
// same tilt, so the trained policy's expected reward is capped by the
// tilt's own expectation: the win rate hovers near a coin flip rather
// than a 70% majority. The mechanism that decides this comparison at
// model scale (inference outputs polluted by preambles that a judge
// penalizes) has no counterpart over a fixed response space.
#[test]
#[ignore = "one-round distillation cannot out-sample the oracle-informed conditional tilt it is trained on"]
fn prefix_eval_training_beats_prefix_inference_in_most_seeds() {
    let fixture = StandardFixture::new();
    let config = fixture.train_config(0);
    let reference = fixture.pretrained();
    let mut wins = 0;
    let n_seeds = 20;
    for seed in 1..=n_seeds {
        let report = analysis::chosen_prefix_inference_eval(
            &reference,
            fixture.inputs(),
            &config,
            &fixture.rules,
            4,
            seed,
        )
        .unwrap();
        if report.trained_iter1_expected > report.prefix10_expected {
            wins += 1;
        }
    }
    assert!(
        wins as f64 >= 0.7 * n_seeds as f64,
        "training won only {wins}/{n_seeds}"
    );
}
