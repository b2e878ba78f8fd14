//! Offline fixtures: a toy news-topic partition and replay scripts for
//! [`ScriptedBackend`](crate::gateway::ScriptedBackend), so the whole pipeline
//! runs without network access.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::artifact::{self, ArtifactError};
use crate::corpus::{self, CorpusError, DatasetConfig, DatasetInstance, Role, TaskFamily};
use crate::gateway::{EndpointConfig, ScriptDefault, ScriptEntry, ScriptFile, ScriptedReply};
use crate::pipeline::{PartitionConfig, PlacementSource, RunConfig};
use crate::proctor::build_quiz_prompt;
use crate::quizgen::{
    assemble_quiz, build_extra_variant_prompt, build_generation_prompt, join_options, PerturbationSet, PlacementPolicy,
    QuizItem, QuizKind, LABEL_PREFIX,
};
use crate::slot::Slot;

pub const TOY_DATASET: &str = "AG News";
pub const TOY_LABELS: [&str; 4] = ["World", "Sports", "Business", "Sci/Tech"];
pub const GENERATOR_MODEL: &str = "mock-generator";
pub const TAKER_MODEL: &str = "mock-taker";

const SUBJECTS: [&str; 8] = [
    "Oil prices",
    "The central bank",
    "A regional carrier",
    "Shares of the chipmaker",
    "The league champion",
    "Negotiators",
    "A satellite operator",
    "The retail chain",
];

const EVENTS: [&str; 6] = [
    "rose sharply on Monday after supply worries returned",
    "said quarterly profit beat forecasts despite weak demand",
    "announced a plan to cut costs across its main division",
    "fell in early trading as investors awaited new figures",
    "reported a large gain after a strong holiday season",
    "signed a deal that expands its network to new markets",
];

/// Word swaps used to fake a word-level paraphrase; column `k` feeds variant `k`.
const SWAPS: [(&str, [&str; 4]); 10] = [
    ("rose", ["climbed", "jumped", "advanced", "increased"]),
    ("fell", ["dropped", "slipped", "declined", "sank"]),
    ("sharply", ["steeply", "strongly", "quickly", "markedly"]),
    ("said", ["stated", "reported", "noted", "declared"]),
    ("announced", ["unveiled", "revealed", "disclosed", "outlined"]),
    ("reported", ["posted", "recorded", "logged", "booked"]),
    ("signed", ["sealed", "struck", "agreed", "inked"]),
    ("plan", ["proposal", "scheme", "program", "strategy"]),
    ("large", ["big", "sizable", "hefty", "major"]),
    ("early", ["morning", "initial", "opening", "first"]),
];
const FALLBACK: [&str; 4] = ["indeed", "reportedly", "notably", "apparently"];

/// `n` rows with `text` and integer `label` columns.
pub fn toy_rows(n: usize) -> Vec<Map<String, Value>> {
    (0..n)
        .map(|i| {
            let text = format!(
                "{} {} (story {i}).",
                SUBJECTS[i % SUBJECTS.len()],
                EVENTS[(i / SUBJECTS.len() + i) % EVENTS.len()]
            );
            match json!({"text": text, "label": i % 4}) {
                Value::Object(m) => m,
                _ => unreachable!(),
            }
        })
        .collect()
}

pub fn toy_dataset_config(split: &str) -> DatasetConfig {
    DatasetConfig {
        dataset_name: TOY_DATASET.into(),
        split_name: split.into(),
        task: TaskFamily::Classification,
        field_map: [(Role::Text, "text".to_string()), (Role::Label, "label".to_string())].into(),
        label_names: Some(
            TOY_LABELS
                .iter()
                .enumerate()
                .map(|(i, n)| (i.to_string(), n.to_string()))
                .collect(),
        ),
        render_template: Some("Article: {{text}}\nLabel: {{label}}".into()),
        id_field: None,
    }
}

fn swap_words(line: &str, k: usize) -> String {
    let mut swapped = false;
    let words: Vec<String> = line
        .split(' ')
        .map(|w| {
            if !swapped {
                if let Some((_, alts)) = SWAPS.iter().find(|(from, _)| *from == w) {
                    swapped = true;
                    return alts[k % 4].to_string();
                }
            }
            w.to_string()
        })
        .collect();
    if swapped {
        return words.join(" ");
    }
    match line.strip_suffix('.') {
        Some(stem) => format!("{stem}, {}.", FALLBACK[k % 4]),
        None => format!("{line} {}", FALLBACK[k % 4]),
    }
}

/// Deterministic fake paraphrase: swaps one word on each non-label line and
/// keeps label lines verbatim. Variants `0..4` are pairwise distinct.
pub fn mock_variant(rendered: &str, k: usize) -> String {
    rendered
        .lines()
        .map(|line| {
            if line.trim_start().starts_with(LABEL_PREFIX) || line.trim().is_empty() {
                line.to_string()
            } else {
                swap_words(line, k)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Replies for the generation prompts of `instances` (and the fourth-variant
/// prompts when `count` is 4), built from [`mock_variant`].
pub fn generator_script(instances: &[DatasetInstance], count: usize) -> ScriptFile {
    let mut responses = Vec::new();
    for inst in instances {
        let variants: Vec<String> = (0..count).map(|k| mock_variant(&inst.rendered_text, k)).collect();
        responses.push(ScriptEntry {
            fingerprint: None,
            prompt: Some(build_generation_prompt(inst)),
            reply: ScriptedReply::text(join_options(&variants[..3], &Slot::ALL[..3])),
        });
        if count == 4 {
            responses.push(ScriptEntry {
                fingerprint: None,
                prompt: Some(build_extra_variant_prompt(inst, &variants[..3])),
                reply: ScriptedReply::text(join_options(&variants[3..], &[Slot::D])),
            });
        }
    }
    ScriptFile {
        default: ScriptDefault::Error,
        responses,
    }
}

/// Perturbation sets matching [`generator_script`].
pub fn mock_perturbations(instances: &[DatasetInstance], count: usize) -> Vec<PerturbationSet> {
    instances
        .iter()
        .map(|inst| PerturbationSet {
            instance_id: inst.instance_id.clone(),
            variants: (0..count).map(|k| mock_variant(&inst.rendered_text, k)).collect(),
            generator_model: GENERATOR_MODEL.into(),
            generation_seedless: true,
        })
        .collect()
}

/// Taker replies for every quiz the pipeline could build from `instances`:
/// the modified quiz and the standard quiz under each of the four placements.
/// `answer` maps a quiz item to the raw response text.
pub fn taker_script(instances: &[DatasetInstance], mut answer: impl FnMut(&QuizItem) -> String) -> ScriptFile {
    let sets = mock_perturbations(instances, 4);
    let mut responses = Vec::new();
    for (inst, set) in instances.iter().zip(&sets) {
        let mut quizzes = vec![assemble_quiz(inst, set, PlacementPolicy::default(), QuizKind::Modified)];
        for slot in Slot::ALL {
            let policy = PlacementPolicy { fixed_slot: slot };
            quizzes.push(assemble_quiz(inst, &set.standard_subset(), policy, QuizKind::Standard));
        }
        for quiz in quizzes {
            let quiz = quiz.expect("mock variants always assemble");
            responses.push(ScriptEntry {
                fingerprint: None,
                prompt: Some(build_quiz_prompt(&quiz, &inst.dataset, &inst.split)),
                reply: ScriptedReply::text(answer(&quiz)),
            });
        }
    }
    ScriptFile {
        default: ScriptDefault::Error,
        responses,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("writing {0}: {1}")]
    Write(PathBuf, String),
}

/// Files of a self-contained offline run.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub run_config: PathBuf,
    pub partition_config: PathBuf,
    pub data: PathBuf,
    pub generator_endpoint: PathBuf,
    pub taker_endpoint: PathBuf,
    pub out_dir: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<(), FixtureError> {
    artifact::write_atomic(path, text).map_err(FixtureError::from)
}

fn to_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), FixtureError> {
    let text = toml::to_string(value).map_err(|e| FixtureError::Write(path.to_path_buf(), e.to_string()))?;
    write_text(path, &text)
}

/// Writes a toy partition of `rows` rows, scripted generator and taker
/// endpoints, and a run config sampling `sample_n` instances with `seed`.
pub fn write_fixture(
    dir: &Path,
    rows: usize,
    sample_n: usize,
    seed: u64,
    placement: PlacementSource,
    answer: impl FnMut(&QuizItem) -> String,
) -> Result<Fixture, FixtureError> {
    let dataset = toy_dataset_config("train");
    let data = dir.join("toy_train.jsonl");
    artifact::write_jsonl(&data, None, &toy_rows(rows))?;

    let partition = corpus::load_partition(&dataset, &data)?;
    let sample = corpus::sample_partition(&partition, sample_n, seed)?;
    let generator = dir.join("generator_script.json");
    let taker = dir.join("taker_script.json");
    artifact::write_json(&generator, &generator_script(&sample, 4))?;
    artifact::write_json(&taker, &taker_script(&sample, answer))?;

    let generator_cfg = EndpointConfig::Scripted {
        model_id: GENERATOR_MODEL.into(),
        script: "generator_script.json".into(),
        max_in_flight: 4,
    };
    let taker_cfg = EndpointConfig::Scripted {
        model_id: TAKER_MODEL.into(),
        script: "taker_script.json".into(),
        max_in_flight: 4,
    };
    let generator_endpoint = dir.join("generator.toml");
    let taker_endpoint = dir.join("taker.toml");
    to_toml(&generator_endpoint, &generator_cfg)?;
    to_toml(&taker_endpoint, &taker_cfg)?;

    let partition_cfg = PartitionConfig {
        source: "toy_train.jsonl".into(),
        dataset,
    };
    let partition_config = dir.join("partition.toml");
    to_toml(&partition_config, &partition_cfg)?;

    let run = RunConfig {
        seed,
        out_dir: "out".into(),
        concurrency: 4,
        sample_n,
        max_attempts: 3,
        placement,
        generator: generator_cfg,
        taker: taker_cfg,
        datasets: vec![partition_cfg],
    };
    let run_config = dir.join("run.toml");
    to_toml(&run_config, &run)?;
    Ok(Fixture {
        run_config,
        partition_config,
        data,
        generator_endpoint,
        taker_endpoint,
        out_dir: dir.join("out"),
    })
}
