//! Built-in laboratory instances. The standard fixture is a small,
//! fully-determined world — eight prompts, sixteen responses, a table
//! oracle whose rewards span [0, 10] per prompt — used by the integration
//! and acceptance tests and writable to disk for CLI runs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::datagen::{CleaningRuleSet, PrefixTemplate};
use crate::oracle::RewardOracle;
use crate::policy::TabularPolicy;
use crate::seeds;
use crate::trainer::{TrainConfig, TrainerInputs};
use crate::types::{
    OfflinePair, Prompt, PromptId, PromptSet, ResponseSpace, SftExample, TypeError,
};

const N_RESPONSES: usize = 16;
const FIXTURE_SEED: u64 = 0x5e1f_9ef5;

const PROMPT_TEXTS: [(&str, &str); 8] = [
    ("p0", "Explain why tides occur."),
    ("p1", "Summarize the water cycle."),
    ("p2", "Describe how rainbows form."),
    ("p3", "Explain what causes seasons."),
    ("p4", "Describe how plants make food."),
    ("p5", "Explain why the sky is blue."),
    ("p6", "Summarize how volcanoes erupt."),
    ("p7", "Describe how magnets attract iron."),
];

// Quality-neutral labels: each prompt's reward table ranks them its own
// way, so the text must not suggest an ordering of its own.
const RESPONSE_TEXTS: [&str; N_RESPONSES] = [
    "draft alpha",
    "draft bravo",
    "draft charlie",
    "the draft delta",
    "draft echo",
    "draft foxtrot",
    "the draft golf",
    "draft hotel",
    "draft india",
    "the draft juliett",
    "draft kilo",
    "draft lima",
    "the draft mike",
    "draft november",
    "draft oscar",
    "the draft papa",
];

fn reward_levels() -> Vec<f64> {
    (0..N_RESPONSES)
        .map(|k| 10.0 * k as f64 / (N_RESPONSES - 1) as f64)
        .collect()
}

/// Reward level index -> response index, per prompt. A fixed shuffle so the
/// best response differs across prompts and greedy behavior must actually
/// be learned per prompt.
fn level_positions(prompt_index: usize) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..N_RESPONSES).collect();
    let mut rng = seeds::derive_rng(FIXTURE_SEED, &["perm", &prompt_index.to_string()]);
    positions.shuffle(&mut rng);
    positions
}

/// The standard fixture: prompts, responses, oracle, seed datasets,
/// templates, and cleaning rules, all deterministic constants.
#[derive(Clone, Debug)]
pub struct StandardFixture {
    pub prompts: PromptSet,
    pub space: ResponseSpace,
    pub oracle: RewardOracle,
    pub sft_data: Vec<SftExample>,
    pub offline_pairs: Vec<OfflinePair>,
    pub template: PrefixTemplate,
    pub rules: CleaningRuleSet,
}

impl Default for StandardFixture {
    fn default() -> Self {
        Self::new()
    }
}

impl StandardFixture {
    pub fn new() -> Self {
        let prompts = PromptSet::new(
            PROMPT_TEXTS
                .iter()
                .map(|(id, text)| Prompt::new(*id, *text))
                .collect(),
        )
        .expect("fixture prompts are valid");
        let space = ResponseSpace::new(
            RESPONSE_TEXTS.iter().map(|s| s.to_string()).collect(),
        )
        .expect("fixture responses are valid");

        let levels = reward_levels();
        let mut table: HashMap<PromptId, HashMap<usize, f64>> = HashMap::new();
        let mut sft_data = Vec::new();
        let mut offline_pairs = Vec::new();
        for (i, (id, _)) in PROMPT_TEXTS.iter().enumerate() {
            let positions = level_positions(i);
            let mut row = HashMap::with_capacity(N_RESPONSES);
            for (level, &response_index) in positions.iter().enumerate() {
                row.insert(response_index, levels[level]);
            }
            table.insert(PromptId::new(*id), row);
            // SFT targets the mid-quality band (levels 8..=10, rewards
            // roughly 5.3 to 6.7): a decent but improvable starting point.
            for level in 8..=10 {
                sft_data.push(SftExample {
                    prompt_id: PromptId::new(*id),
                    response: RESPONSE_TEXTS[positions[level]].to_string(),
                });
            }
            // Offline seed preference: level 12 (8.0) over level 3 (2.0).
            offline_pairs.push(OfflinePair {
                prompt_id: PromptId::new(*id),
                chosen: RESPONSE_TEXTS[positions[12]].to_string(),
                rejected: RESPONSE_TEXTS[positions[3]].to_string(),
            });
        }
        let oracle =
            RewardOracle::table(table, &space, 10.0).expect("fixture rewards in range");

        StandardFixture {
            prompts,
            space,
            oracle,
            sft_data,
            offline_pairs,
            template: PrefixTemplate::default(),
            rules: CleaningRuleSet::default_rules(),
        }
    }

    pub fn pretrained(&self) -> TabularPolicy {
        TabularPolicy::uniform(&self.prompts, self.space.len())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            sft_max_steps: 600,
            steps_per_iteration: 2000,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn inputs(&self) -> TrainerInputs<'_> {
        TrainerInputs {
            prompts: &self.prompts,
            space: &self.space,
            oracle: &self.oracle,
            sft_data: &self.sft_data,
            offline_pairs: &self.offline_pairs,
            template: &self.template,
            rules: &self.rules,
        }
    }

    /// Writes the fixture as the CLI's input files.
    pub fn write_files(&self, dir: &Path) -> Result<(), TypeError> {
        std::fs::create_dir_all(dir).map_err(|source| TypeError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let write = |name: &str, body: String| -> Result<(), TypeError> {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| TypeError::Io {
                path: path.display().to_string(),
                source,
            })
        };

        let prompts: Vec<&Prompt> = self.prompts.iter().collect();
        write(
            "prompts.json",
            serde_json::to_string_pretty(&prompts).expect("prompts serialize") + "\n",
        )?;
        let responses: Vec<&str> = self.space.iter().collect();
        write(
            "responses.json",
            serde_json::to_string_pretty(&responses).expect("responses serialize") + "\n",
        )?;

        // Table oracle in the on-disk schema {prompt_id: {index: reward}}.
        let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for prompt in self.prompts.iter() {
            let row = self
                .oracle
                .reward_row(&prompt.id, &self.space)
                .expect("fixture oracle covers its space");
            let entry = table.entry(prompt.id.to_string()).or_default();
            for (index, value) in row.iter().enumerate() {
                entry.insert(index.to_string(), *value);
            }
        }
        write(
            "oracle.json",
            serde_json::to_string_pretty(&table).expect("oracle serializes") + "\n",
        )?;

        write(
            "sft.json",
            serde_json::to_string_pretty(&self.sft_data).expect("sft serializes") + "\n",
        )?;
        let offline_lines: String = self
            .offline_pairs
            .iter()
            .map(|p| serde_json::to_string(p).expect("pair serializes") + "\n")
            .collect();
        write("offline_pairs.jsonl", offline_lines)?;

        self.rules
            .save(&dir.join("cleaning_rules.json"))
            .map_err(|e| TypeError::Io {
                path: dir.join("cleaning_rules.json").display().to_string(),
                source: std::io::Error::other(e.to_string()),
            })?;
        Ok(())
    }
}

/// A wide instance for statistical checks: `n_prompts` synthetic prompts
/// over the standard response space, each with its own reward shuffle.
pub fn wide_fixture(n_prompts: usize) -> (PromptSet, ResponseSpace, RewardOracle) {
    let prompts = PromptSet::new(
        (0..n_prompts)
            .map(|i| Prompt::new(format!("w{i:04}"), format!("Synthetic instruction {i}.")))
            .collect(),
    )
    .expect("synthetic prompts are valid");
    let space = ResponseSpace::new(
        RESPONSE_TEXTS.iter().map(|s| s.to_string()).collect(),
    )
    .expect("responses valid");
    let levels = reward_levels();
    let mut table: HashMap<PromptId, HashMap<usize, f64>> = HashMap::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let positions = level_positions(i + 1000);
        let mut row = HashMap::with_capacity(N_RESPONSES);
        for (level, &response_index) in positions.iter().enumerate() {
            row.insert(response_index, levels[level]);
        }
        table.insert(prompt.id.clone(), row);
    }
    let oracle = RewardOracle::table(table, &space, 10.0).expect("rewards in range");
    (prompts, space, oracle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_rewards_span_zero_to_ten_per_prompt() {
        let fixture = StandardFixture::new();
        for prompt in fixture.prompts.iter() {
            let row = fixture
                .oracle
                .reward_row(&prompt.id, &fixture.space)
                .unwrap();
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(min, 0.0);
            assert_eq!(max, 10.0);
        }
    }

    #[test]
    fn fixture_is_deterministic() {
        let a = StandardFixture::new();
        let b = StandardFixture::new();
        for prompt in a.prompts.iter() {
            assert_eq!(
                a.oracle.reward_row(&prompt.id, &a.space).unwrap(),
                b.oracle.reward_row(&prompt.id, &b.space).unwrap()
            );
        }
        assert_eq!(a.sft_data, b.sft_data);
        assert_eq!(a.offline_pairs, b.offline_pairs);
    }

    #[test]
    fn sft_targets_sit_in_the_mid_band() {
        let fixture = StandardFixture::new();
        for example in &fixture.sft_data {
            let r = fixture
                .oracle
                .score(&example.prompt_id, &example.response)
                .unwrap();
            assert!((5.0..7.0).contains(&r), "sft reward {r}");
        }
    }

    #[test]
    fn files_round_trip_through_loaders() {
        let fixture = StandardFixture::new();
        let dir = tempfile::tempdir().unwrap();
        fixture.write_files(dir.path()).unwrap();
        let prompts = PromptSet::load(&dir.path().join("prompts.json")).unwrap();
        assert_eq!(prompts.len(), 8);
        let space = ResponseSpace::load(&dir.path().join("responses.json")).unwrap();
        assert_eq!(space.len(), 16);
        let oracle =
            RewardOracle::load_table(&dir.path().join("oracle.json"), &space, 10.0).unwrap();
        for prompt in prompts.iter() {
            assert_eq!(
                oracle.reward_row(&prompt.id, &space).unwrap(),
                fixture.oracle.reward_row(&prompt.id, &space).unwrap()
            );
        }
        let sft = crate::types::load_sft_data(&dir.path().join("sft.json")).unwrap();
        assert_eq!(sft, fixture.sft_data);
        let offline =
            crate::types::load_offline_pairs(&dir.path().join("offline_pairs.jsonl")).unwrap();
        assert_eq!(offline, fixture.offline_pairs);
    }
}
