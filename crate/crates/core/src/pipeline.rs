//! File-based stage orchestration.
//!
//! Every stage reads and writes JSONL/JSON artifacts that start with an
//! [`ArtifactHeader`]. [`run_pipeline`] chains them per partition and skips any
//! stage whose output already exists, so an interrupted run can be resumed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::{self, ArtifactError, ArtifactHeader};
use crate::calibration::{self, BiasProfile, CalibrationError};
use crate::corpus::{self, CorpusError, DatasetConfig, DatasetInstance};
use crate::gateway::{CompletionBackend, EndpointConfig, GatewayError};
use crate::proctor::{self, AnswerRecord, ProctorError};
use crate::quizgen::{self, PerturbationSet, PlacementPolicy, QuizItem, QuizKind, QuizgenError};
use crate::report::{render_grid, GridFormat, ReportFile};
use crate::scoring::{self, ScoreReport, ScoringError};
use crate::simlab::SimError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;
pub const EXIT_EXHAUSTED: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Quizgen(#[from] QuizgenError),
    #[error("{failed} of {total} instance(s) exhausted their generation attempts; see {report}")]
    GenerationFailures {
        failed: usize,
        total: usize,
        report: String,
    },
    #[error(transparent)]
    Proctor(#[from] ProctorError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Corpus(_) => EXIT_CONFIG,
            PipelineError::Gateway(GatewayError::Config(_) | GatewayError::Auth(_)) => EXIT_CONFIG,
            PipelineError::Gateway(_) => EXIT_TRANSPORT,
            PipelineError::Quizgen(QuizgenError::GenerationExhausted { .. })
            | PipelineError::GenerationFailures { .. } => EXIT_EXHAUSTED,
            PipelineError::Quizgen(QuizgenError::Gateway(GatewayError::Config(_) | GatewayError::Auth(_))) => {
                EXIT_CONFIG
            }
            PipelineError::Quizgen(QuizgenError::Gateway(_)) => EXIT_TRANSPORT,
            _ => EXIT_FAILURE,
        }
    }
}

/// A failure tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {error}")]
pub struct StageFailure {
    pub stage: String,
    #[source]
    pub error: PipelineError,
}

impl StageFailure {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

trait InStage<T> {
    fn in_stage(self, stage: &str) -> Result<T, StageFailure>;
}

impl<T, E: Into<PipelineError>> InStage<T> for Result<T, E> {
    fn in_stage(self, stage: &str) -> Result<T, StageFailure> {
        self.map_err(|e| StageFailure {
            stage: stage.to_string(),
            error: e.into(),
        })
    }
}

/// Where the standard quiz's correct slot comes from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementSource {
    /// Slot D.
    #[default]
    Default,
    /// Run a modified quiz per partition and use its least-preferred slot.
    Calibrate,
    /// Least-preferred slot of an existing `bias.json`.
    File(PathBuf),
}

/// One dataset partition and the file it is read from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub source: PathBuf,
    #[serde(flatten)]
    pub dataset: DatasetConfig,
}

fn default_concurrency() -> usize {
    4
}

fn default_sample_n() -> usize {
    100
}

fn default_max_attempts() -> u32 {
    quizgen::DEFAULT_MAX_ATTEMPTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_sample_n")]
    pub sample_n: usize,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default)]
    pub placement: PlacementSource,
    pub generator: EndpointConfig,
    pub taker: EndpointConfig,
    pub datasets: Vec<PartitionConfig>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Loads a TOML (or `.json`) config, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("reading {}: {e}", path.display())))?;
        let mut config: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&raw).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&raw).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut config.out_dir);
        config.generator.resolve_paths(base);
        config.taker.resolve_paths(base);
        if let PlacementSource::File(p) = &mut config.placement {
            resolve(base, p);
        }
        for partition in &mut config.datasets {
            resolve(base, &mut partition.source);
        }
        config.validate()?;
        Ok(config)
    }

    /// Checks field ranges, dataset configs, and that referenced files exist.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.datasets.is_empty() {
            return Err(PipelineError::Config("no datasets configured".into()));
        }
        if self.sample_n == 0 || self.concurrency == 0 {
            return Err(PipelineError::Config(
                "sample_n and concurrency must be positive".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.datasets {
            p.dataset.validate()?;
            if !p.source.is_file() {
                return Err(PipelineError::Config(format!(
                    "source file {} does not exist",
                    p.source.display()
                )));
            }
            if !seen.insert(partition_dir_name(&p.dataset)) {
                return Err(PipelineError::Config(format!(
                    "partition {}/{} listed twice",
                    p.dataset.dataset_name, p.dataset.split_name
                )));
            }
        }
        for endpoint in [&self.generator, &self.taker] {
            if let EndpointConfig::Scripted { script, .. } = endpoint {
                if !script.is_file() {
                    return Err(PipelineError::Config(format!(
                        "script file {} does not exist",
                        script.display()
                    )));
                }
            }
        }
        if let PlacementSource::File(p) = &self.placement {
            if !p.is_file() {
                return Err(PipelineError::Config(format!(
                    "bias file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Directory name for a partition, e.g. `ag_news-train`.
pub fn partition_dir_name(config: &DatasetConfig) -> String {
    format!("{}-{}", slug(&config.dataset_name), slug(&config.split_name))
}

/// `bias.json`: the profile plus its header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<ArtifactHeader>,
    #[serde(flatten)]
    pub profile: BiasProfile,
}

impl BiasFile {
    pub fn read(path: &Path) -> Result<Self, ArtifactError> {
        artifact::read_json(path)
    }
}

/// Renders and samples one partition, writing `sample.jsonl`.
pub fn stage_sample(
    dataset: &DatasetConfig,
    source: &Path,
    n: usize,
    seed: u64,
    out: &Path,
    timestamp: &str,
) -> Result<Vec<DatasetInstance>, PipelineError> {
    let partition = corpus::load_partition(dataset, source)?;
    let sample = corpus::sample_partition(&partition, n, seed)?;
    let header = ArtifactHeader::new("sample", &json!({"dataset": dataset, "n": n}), Some(seed), timestamp);
    artifact::write_jsonl(out, Some(&header), &sample)?;
    Ok(sample)
}

fn pool(concurrency: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
}

/// Generates `count` perturbations per instance, writing them to `out`.
///
/// Instances whose attempts run out are listed in `<out>.failures.jsonl`; the
/// stage then fails without writing `out`.
pub fn stage_generate(
    backend: &dyn CompletionBackend,
    sample: &[DatasetInstance],
    count: usize,
    max_attempts: u32,
    concurrency: usize,
    out: &Path,
    timestamp: &str,
) -> Result<Vec<PerturbationSet>, PipelineError> {
    let workers = concurrency.min(backend.max_in_flight());
    let results: Vec<Result<PerturbationSet, QuizgenError>> = pool(workers)?.install(|| {
        sample
            .par_iter()
            .map(|inst| quizgen::generate_perturbations(backend, inst, count, max_attempts))
            .collect()
    });
    let mut sets = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (inst, result) in sample.iter().zip(results) {
        match result {
            Ok(set) => sets.push(set),
            Err(QuizgenError::GenerationExhausted {
                last_failure, attempts, ..
            }) => failures.push(json!({
                "instance_id": inst.instance_id,
                "attempts": attempts,
                "last_failure": last_failure,
            })),
            Err(e) => return Err(e.into()),
        }
    }
    let params = json!({"count": count, "max_attempts": max_attempts, "generator": backend.model_id()});
    if !failures.is_empty() {
        let report = out.with_extension("failures.jsonl");
        let header = ArtifactHeader::new("generate", &params, None, timestamp);
        artifact::write_jsonl(&report, Some(&header), &failures)?;
        artifact::write_jsonl(&out.with_extension("partial.jsonl"), Some(&header), &sets)?;
        return Err(PipelineError::GenerationFailures {
            failed: failures.len(),
            total: sample.len(),
            report: report.display().to_string(),
        });
    }
    let header = ArtifactHeader::new("generate", &params, None, timestamp);
    artifact::write_jsonl(out, Some(&header), &sets)?;
    Ok(sets)
}

/// Builds one quiz per sampled instance from its perturbation set.
///
/// Standard quizzes use the first three variants of each set.
pub fn assemble_all(
    sample: &[DatasetInstance],
    perturbations: &[PerturbationSet],
    policy: PlacementPolicy,
    kind: QuizKind,
) -> Result<Vec<QuizItem>, PipelineError> {
    sample
        .iter()
        .map(|inst| {
            let set = perturbations
                .iter()
                .find(|p| p.instance_id == inst.instance_id)
                .ok_or_else(|| PipelineError::Config(format!("no perturbations for instance {}", inst.instance_id)))?;
            let set = match kind {
                QuizKind::Standard => set.standard_subset(),
                QuizKind::Modified => set.clone(),
            };
            Ok(quizgen::assemble_quiz(inst, &set, policy, kind)?)
        })
        .collect()
}

pub fn stage_assemble(
    sample: &[DatasetInstance],
    perturbations: &[PerturbationSet],
    policy: PlacementPolicy,
    kind: QuizKind,
    out: &Path,
    timestamp: &str,
) -> Result<Vec<QuizItem>, PipelineError> {
    let quiz = assemble_all(sample, perturbations, policy, kind)?;
    let header = ArtifactHeader::new("assemble", &json!({"kind": kind, "policy": policy}), None, timestamp);
    artifact::write_jsonl(out, Some(&header), &quiz)?;
    Ok(quiz)
}

/// Administers a quiz file's items, writing the answers.
pub fn stage_run(
    backend: &dyn CompletionBackend,
    quiz: &[QuizItem],
    concurrency: usize,
    out: &Path,
    timestamp: &str,
) -> Result<Vec<AnswerRecord>, PipelineError> {
    let mut records = Vec::with_capacity(quiz.len());
    // one prompt per partition naming its dataset and split
    let mut partitions: Vec<(String, String)> = quiz.iter().map(|q| (q.dataset.clone(), q.split.clone())).collect();
    partitions.sort();
    partitions.dedup();
    for (dataset, split) in &partitions {
        let items: Vec<QuizItem> = quiz
            .iter()
            .filter(|q| &q.dataset == dataset && &q.split == split)
            .cloned()
            .collect();
        records.extend(proctor::administer(backend, &items, dataset, split, concurrency)?);
    }
    let header = ArtifactHeader::new("run", &json!({"taker": backend.model_id()}), None, timestamp);
    artifact::write_jsonl(out, Some(&header), &records)?;
    Ok(records)
}

pub fn stage_calibrate(records: &[AnswerRecord], out: &Path, timestamp: &str) -> Result<BiasProfile, PipelineError> {
    let profile = calibration::compute_bias_profile(records)?;
    let header = ArtifactHeader::new("calibrate", &json!({"records": records.len()}), None, timestamp);
    artifact::write_json(
        out,
        &BiasFile {
            header: Some(header),
            profile: profile.clone(),
        },
    )?;
    Ok(profile)
}

pub fn stage_score(records: &[AnswerRecord], out: &Path, timestamp: &str) -> Result<Vec<ScoreReport>, PipelineError> {
    let reports = scoring::score_runs(records)?;
    let header = ArtifactHeader::new("score", &json!({"records": records.len()}), None, timestamp);
    ReportFile {
        header: Some(header),
        reports: reports.clone(),
    }
    .write(out)?;
    Ok(reports)
}

/// Paths of one partition's artifacts.
#[derive(Debug, Clone)]
pub struct PartitionPaths {
    pub dir: PathBuf,
    pub sample: PathBuf,
    pub perturbations: PathBuf,
    pub modified_quiz: PathBuf,
    pub modified_answers: PathBuf,
    pub bias: PathBuf,
    pub quiz: PathBuf,
    pub answers: PathBuf,
}

impl PartitionPaths {
    pub fn new(out_dir: &Path, dataset: &DatasetConfig) -> Self {
        let dir = out_dir.join(partition_dir_name(dataset));
        PartitionPaths {
            sample: dir.join("sample.jsonl"),
            perturbations: dir.join("perturbations.jsonl"),
            modified_quiz: dir.join("modified_quiz.jsonl"),
            modified_answers: dir.join("modified_answers.jsonl"),
            bias: dir.join("bias.json"),
            quiz: dir.join("quiz.jsonl"),
            answers: dir.join("answers.jsonl"),
            dir,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub reports: Vec<ScoreReport>,
    pub report_path: PathBuf,
    pub generator_requests: u64,
    pub taker_requests: u64,
}

fn load_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    Ok(artifact::read_jsonl(path)?.1)
}

/// Lazily connected backend, so cached stages never need credentials.
struct LazyBackend<'a> {
    config: &'a EndpointConfig,
    backend: Option<Arc<dyn CompletionBackend>>,
}

impl<'a> LazyBackend<'a> {
    fn new(config: &'a EndpointConfig) -> Self {
        LazyBackend { config, backend: None }
    }

    fn get(&mut self) -> Result<Arc<dyn CompletionBackend>, GatewayError> {
        if let Some(b) = &self.backend {
            return Ok(b.clone());
        }
        let b = self.config.connect()?;
        self.backend = Some(b.clone());
        Ok(b)
    }

    fn requests(&self) -> u64 {
        self.backend.as_ref().map_or(0, |b| b.requests_sent())
    }
}

/// sample -> generate -> [modified quiz -> run -> calibrate] -> assemble -> run -> score -> report.
pub fn run_pipeline(config: &RunConfig, timestamp: &str) -> Result<PipelineSummary, StageFailure> {
    config.validate().in_stage("config")?;
    let mut generator = LazyBackend::new(&config.generator);
    let mut taker = LazyBackend::new(&config.taker);
    let calibrate = config.placement == PlacementSource::Calibrate;
    let fixed_policy = match &config.placement {
        PlacementSource::File(p) => Some(calibration::derive_placement(
            &BiasFile::read(p).in_stage("config")?.profile,
        )),
        PlacementSource::Default => Some(PlacementPolicy::default()),
        PlacementSource::Calibrate => None,
    };
    let mut all_answers = Vec::new();
    let mut modified_answers = Vec::new();

    for partition in &config.datasets {
        let dataset = &partition.dataset;
        let paths = PartitionPaths::new(&config.out_dir, dataset);
        log::info!("partition {}/{}", dataset.dataset_name, dataset.split_name);

        let sample: Vec<DatasetInstance> = if paths.sample.exists() {
            load_rows(&paths.sample).in_stage("sample")?
        } else {
            stage_sample(
                dataset,
                &partition.source,
                config.sample_n,
                config.seed,
                &paths.sample,
                timestamp,
            )
            .in_stage("sample")?
        };

        let count = if calibrate { 4 } else { 3 };
        let perturbations: Vec<PerturbationSet> = if paths.perturbations.exists() {
            load_rows(&paths.perturbations).in_stage("generate")?
        } else {
            let backend = generator.get().in_stage("generate")?;
            stage_generate(
                backend.as_ref(),
                &sample,
                count,
                config.max_attempts,
                config.concurrency,
                &paths.perturbations,
                timestamp,
            )
            .in_stage("generate")?
        };

        let policy = match fixed_policy {
            Some(p) => p,
            None => {
                let modified: Vec<QuizItem> = if paths.modified_quiz.exists() {
                    load_rows(&paths.modified_quiz).in_stage("assemble")?
                } else {
                    stage_assemble(
                        &sample,
                        &perturbations,
                        PlacementPolicy::default(),
                        QuizKind::Modified,
                        &paths.modified_quiz,
                        timestamp,
                    )
                    .in_stage("assemble")?
                };
                let answers: Vec<AnswerRecord> = if paths.modified_answers.exists() {
                    load_rows(&paths.modified_answers).in_stage("run")?
                } else {
                    let backend = taker.get().in_stage("run")?;
                    stage_run(
                        backend.as_ref(),
                        &modified,
                        config.concurrency,
                        &paths.modified_answers,
                        timestamp,
                    )
                    .in_stage("run")?
                };
                let profile = if paths.bias.exists() {
                    BiasFile::read(&paths.bias).in_stage("calibrate")?.profile
                } else {
                    stage_calibrate(&answers, &paths.bias, timestamp).in_stage("calibrate")?
                };
                modified_answers.extend(answers);
                calibration::derive_placement(&profile)
            }
        };

        let quiz: Vec<QuizItem> = if paths.quiz.exists() {
            load_rows(&paths.quiz).in_stage("assemble")?
        } else {
            stage_assemble(
                &sample,
                &perturbations,
                policy,
                QuizKind::Standard,
                &paths.quiz,
                timestamp,
            )
            .in_stage("assemble")?
        };
        let answers: Vec<AnswerRecord> = if paths.answers.exists() {
            load_rows(&paths.answers).in_stage("run")?
        } else {
            let backend = taker.get().in_stage("run")?;
            stage_run(backend.as_ref(), &quiz, config.concurrency, &paths.answers, timestamp).in_stage("run")?
        };
        all_answers.extend(answers);
    }

    if calibrate && !modified_answers.is_empty() {
        stage_calibrate(&modified_answers, &config.out_dir.join("bias_pooled.json"), timestamp)
            .in_stage("calibrate")?;
    }
    let report_path = config.out_dir.join("report.json");
    let reports = stage_score(&all_answers, &report_path, timestamp).in_stage("score")?;
    artifact::write_atomic(
        &config.out_dir.join("report.txt"),
        &render_grid(&reports, GridFormat::Table),
    )
    .in_stage("report")?;
    Ok(PipelineSummary {
        reports,
        report_path,
        generator_requests: generator.requests(),
        taker_requests: taker.requests(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("AG News"), "ag_news");
        assert_eq!(slug("  Yelp -- Full "), "yelp_full");
    }

    #[test]
    fn placement_source_toml() {
        #[derive(Deserialize)]
        struct W {
            placement: PlacementSource,
        }
        let w: W = toml::from_str("placement = \"calibrate\"").unwrap();
        assert_eq!(w.placement, PlacementSource::Calibrate);
        let w: W = toml::from_str("placement = { file = \"bias.json\" }").unwrap();
        assert_eq!(w.placement, PlacementSource::File("bias.json".into()));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config("x".into()).exit_code(), EXIT_CONFIG);
        assert_eq!(
            PipelineError::Gateway(GatewayError::Transport {
                message: "x".into(),
                attempts: 4
            })
            .exit_code(),
            EXIT_TRANSPORT
        );
        assert_eq!(
            PipelineError::Gateway(GatewayError::Auth("KEY".into())).exit_code(),
            EXIT_CONFIG
        );
        assert_eq!(
            PipelineError::GenerationFailures {
                failed: 1,
                total: 2,
                report: "f".into()
            }
            .exit_code(),
            EXIT_EXHAUSTED
        );
    }
}
