//! `dcq`: build, administer and score contamination quizzes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcq_core::artifact::{self, current_timestamp, ArtifactHeader};
use dcq_core::calibration::derive_placement;
use dcq_core::gateway::EndpointConfig;
use dcq_core::pipeline::{self, BiasFile, PartitionConfig, PipelineError, RunConfig, StageFailure};
use dcq_core::quizgen::{self, PerturbationSet};
use dcq_core::report::{render_grid, GridFormat, ReportFile};
use dcq_core::simlab::{estimator_sweep, sweep_csv, SweepConfig};
use dcq_core::{AnswerRecord, DatasetInstance, PlacementPolicy, QuizItem, QuizKind, Slot, SlotProbs};

#[derive(Parser, Debug)]
#[command(name = "dcq", version, about = "Contamination quizzes for language models")]
struct Cli {
    /// Config file for the command (partition config for `sample`, run config for `pipeline`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for default output paths.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Maximum concurrent requests per stage.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render and sample one dataset partition.
    Sample(SampleArgs),
    /// Generate perturbations and assemble a quiz.
    Generate(GenerateArgs),
    /// Rebuild a quiz from saved perturbations.
    Assemble(AssembleArgs),
    /// Derive the least-preferred slot from modified-quiz answers.
    Calibrate(CalibrateArgs),
    /// Administer a quiz to a taker model.
    Run(RunArgs),
    /// Score standard-quiz answers.
    Score(ScoreArgs),
    /// Print the score grid of a report file.
    Report(ReportArgs),
    /// Monte Carlo sweep of the estimator against a synthetic taker.
    Simulate(SimulateArgs),
    /// Run every stage for every partition in a run config.
    Pipeline,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Sampled instances.
    #[arg(long = "in")]
    input: PathBuf,
    /// Generator endpoint config.
    #[arg(long)]
    endpoint: PathBuf,
    #[arg(long, default_value = "standard")]
    kind: QuizKind,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also keep the raw perturbation sets here.
    #[arg(long)]
    perturbations_out: Option<PathBuf>,
    #[command(flatten)]
    placement: PlacementArgs,
    #[arg(long, default_value_t = quizgen::DEFAULT_MAX_ATTEMPTS)]
    max_attempts: u32,
}

#[derive(Args, Debug)]
struct PlacementArgs {
    /// Put the original in the least-preferred slot of this bias file.
    #[arg(long, conflicts_with = "slot")]
    placement_from: Option<PathBuf>,
    /// Put the original in this slot.
    #[arg(long)]
    slot: Option<Slot>,
}

#[derive(Args, Debug)]
struct AssembleArgs {
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    perturbations: PathBuf,
    #[arg(long, default_value = "standard")]
    kind: QuizKind,
    #[command(flatten)]
    placement: PlacementArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    answers: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    quiz: PathBuf,
    /// Taker endpoint config.
    #[arg(long)]
    endpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// One or more answer files.
    #[arg(long, required = true, num_args = 1..)]
    answers: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "table")]
    format: GridFormat,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Memorization rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<f64>>,
    /// Guess bias: either the weight on the correct slot (rest split evenly)
    /// or four slash-separated weights `A/B/C/D`. Repeatable.
    #[arg(long)]
    bias: Vec<String>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Slot holding the original in the simulated quizzes.
    #[arg(long, default_value = "D")]
    correct_slot: Slot,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn fail(stage: &str) -> impl Fn(PipelineError) -> StageFailure + '_ {
    move |error| StageFailure {
        stage: stage.to_string(),
        error,
    }
}

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    concurrency: Option<usize>,
    timestamp: String,
}

impl Ctx {
    fn out(&self, explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.out_dir.as_deref().unwrap_or(Path::new(".")).join(default_name))
    }

    fn concurrency(&self) -> usize {
        self.concurrency.unwrap_or(4).max(1)
    }
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    Ok(artifact::read_jsonl(path)?.1)
}

fn load_partition_config(path: &Path) -> Result<PartitionConfig, PipelineError> {
    let raw = std::fs::read_to_string(path).map_err(|e| config_err(format!("reading {}: {e}", path.display())))?;
    let mut config: PartitionConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&raw).map_err(|e| config_err(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&raw).map_err(|e| config_err(format!("{}: {e}", path.display())))?
    };
    if config.source.is_relative() {
        config.source = path.parent().unwrap_or(Path::new(".")).join(&config.source);
    }
    config.dataset.validate()?;
    Ok(config)
}

fn load_endpoint(path: &Path) -> Result<EndpointConfig, PipelineError> {
    Ok(EndpointConfig::load(path)?)
}

fn placement(args: &PlacementArgs) -> Result<PlacementPolicy, PipelineError> {
    Ok(match (&args.placement_from, args.slot) {
        (Some(path), _) => derive_placement(&BiasFile::read(path)?.profile),
        (None, Some(slot)) => PlacementPolicy { fixed_slot: slot },
        (None, None) => PlacementPolicy::default(),
    })
}

fn parse_bias(s: &str, correct: Slot) -> Result<SlotProbs, PipelineError> {
    let parts: Vec<&str> = s.split('/').collect();
    let values: Result<Vec<f64>, _> = parts.iter().map(|p| p.trim().parse::<f64>()).collect();
    let values = values.map_err(|e| config_err(format!("bad --bias {s:?}: {e}")))?;
    match values.as_slice() {
        [w] => Ok(SlotProbs::with_slot_weight(correct, *w)),
        [a, b, c, d] => Ok(SlotProbs::new([*a, *b, *c, *d])),
        _ => Err(config_err(format!(
            "--bias {s:?} needs one weight or four A/B/C/D weights"
        ))),
    }
}

fn cmd_sample(ctx: &Ctx, args: SampleArgs) -> Result<(), StageFailure> {
    let stage = "sample";
    let path = ctx
        .config
        .as_deref()
        .ok_or_else(|| fail(stage)(config_err("sample needs --config <partition file>")))?;
    let partition = load_partition_config(path).map_err(fail(stage))?;
    let seed = ctx.seed.ok_or_else(|| fail(stage)(config_err("sample needs --seed")))?;
    let out = ctx.out(args.out, "sample.jsonl");
    let sample = pipeline::stage_sample(
        &partition.dataset,
        &partition.source,
        args.n,
        seed,
        &out,
        &ctx.timestamp,
    )
    .map_err(fail(stage))?;
    eprintln!("sampled {} instance(s) -> {}", sample.len(), out.display());
    Ok(())
}

fn cmd_generate(ctx: &Ctx, args: GenerateArgs) -> Result<(), StageFailure> {
    let stage = "generate";
    let sample: Vec<DatasetInstance> = read_rows(&args.input).map_err(fail(stage))?;
    let policy = placement(&args.placement).map_err(fail(stage))?;
    let backend = load_endpoint(&args.endpoint)
        .and_then(|e| Ok(e.connect()?))
        .map_err(fail(stage))?;
    let out = ctx.out(args.out, "quiz.jsonl");
    let sets_path = args
        .perturbations_out
        .unwrap_or_else(|| out.with_file_name("perturbations.jsonl"));
    let sets = pipeline::stage_generate(
        backend.as_ref(),
        &sample,
        args.kind.variant_count(),
        args.max_attempts,
        ctx.concurrency(),
        &sets_path,
        &ctx.timestamp,
    )
    .map_err(fail(stage))?;
    let quiz =
        pipeline::stage_assemble(&sample, &sets, policy, args.kind, &out, &ctx.timestamp).map_err(fail("assemble"))?;
    eprintln!(
        "{} {} quiz item(s) -> {} ({} request(s))",
        quiz.len(),
        args.kind,
        out.display(),
        backend.requests_sent()
    );
    Ok(())
}

fn cmd_assemble(ctx: &Ctx, args: AssembleArgs) -> Result<(), StageFailure> {
    let stage = "assemble";
    let sample: Vec<DatasetInstance> = read_rows(&args.sample).map_err(fail(stage))?;
    let sets: Vec<PerturbationSet> = read_rows(&args.perturbations).map_err(fail(stage))?;
    let policy = placement(&args.placement).map_err(fail(stage))?;
    let out = ctx.out(args.out, "quiz.jsonl");
    let quiz =
        pipeline::stage_assemble(&sample, &sets, policy, args.kind, &out, &ctx.timestamp).map_err(fail(stage))?;
    eprintln!("{} quiz item(s) -> {}", quiz.len(), out.display());
    Ok(())
}

fn cmd_calibrate(ctx: &Ctx, args: CalibrateArgs) -> Result<(), StageFailure> {
    let stage = "calibrate";
    let records: Vec<AnswerRecord> = read_rows(&args.answers).map_err(fail(stage))?;
    let out = ctx.out(args.out, "bias.json");
    let profile = pipeline::stage_calibrate(&records, &out, &ctx.timestamp).map_err(fail(stage))?;
    let [a, b, c, d] = profile.counts.to_array();
    eprintln!(
        "counts A={a} B={b} C={c} D={d}; least preferred {} -> {}",
        profile.least_preferred,
        out.display()
    );
    Ok(())
}

fn cmd_run(ctx: &Ctx, args: RunArgs) -> Result<(), StageFailure> {
    let stage = "run";
    let quiz: Vec<QuizItem> = read_rows(&args.quiz).map_err(fail(stage))?;
    let backend = load_endpoint(&args.endpoint)
        .and_then(|e| Ok(e.connect()?))
        .map_err(fail(stage))?;
    let out = ctx.out(args.out, "answers.jsonl");
    let records =
        pipeline::stage_run(backend.as_ref(), &quiz, ctx.concurrency(), &out, &ctx.timestamp).map_err(fail(stage))?;
    eprintln!(
        "{} answer(s) -> {} ({} request(s))",
        records.len(),
        out.display(),
        backend.requests_sent()
    );
    Ok(())
}

fn cmd_score(ctx: &Ctx, args: ScoreArgs) -> Result<(), StageFailure> {
    let stage = "score";
    let mut records: Vec<AnswerRecord> = Vec::new();
    for path in &args.answers {
        records.extend(read_rows::<AnswerRecord>(path).map_err(fail(stage))?);
    }
    let out = ctx.out(args.out, "report.json");
    let reports = pipeline::stage_score(&records, &out, &ctx.timestamp).map_err(fail(stage))?;
    print!("{}", render_grid(&reports, GridFormat::Table));
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), StageFailure> {
    let file = ReportFile::read(&args.input)
        .map_err(PipelineError::from)
        .map_err(fail("report"))?;
    print!("{}", render_grid(&file.reports, args.format));
    Ok(())
}

fn cmd_simulate(ctx: &Ctx, args: SimulateArgs) -> Result<(), StageFailure> {
    let stage = "simulate";
    let defaults = SweepConfig::default();
    let mut bias_values = Vec::new();
    for b in &args.bias {
        bias_values.push(parse_bias(b, args.correct_slot).map_err(fail(stage))?);
    }
    if bias_values.is_empty() {
        bias_values = defaults.bias_values;
    }
    let config = SweepConfig {
        m_values: args.m.unwrap_or(defaults.m_values),
        bias_values,
        n: args.n,
        trials: args.trials,
        seed: ctx.seed.unwrap_or(defaults.seed),
        correct_slot: args.correct_slot,
    };
    let rows = estimator_sweep(&config)
        .map_err(PipelineError::from)
        .map_err(fail(stage))?;
    let header = ArtifactHeader::new(stage, &config, Some(config.seed), &ctx.timestamp);
    let header_line = serde_json::to_string(&header).expect("header serializes");
    let text = format!("# {header_line}\n{}", sweep_csv(&rows));
    let out = ctx.out(args.out, "sweep.csv");
    artifact::write_atomic(&out, &text)
        .map_err(PipelineError::from)
        .map_err(fail(stage))?;
    eprintln!("{} sweep row(s) -> {}", rows.len(), out.display());
    Ok(())
}

fn cmd_pipeline(ctx: &Ctx) -> Result<(), StageFailure> {
    let path = ctx
        .config
        .as_deref()
        .ok_or_else(|| fail("config")(config_err("pipeline needs --config <run config>")))?;
    let mut config = RunConfig::load(path).map_err(fail("config"))?;
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    if let Some(dir) = &ctx.out_dir {
        config.out_dir = dir.clone();
    }
    if let Some(n) = ctx.concurrency {
        config.concurrency = n.max(1);
    }
    let summary = pipeline::run_pipeline(&config, &ctx.timestamp)?;
    print!("{}", render_grid(&summary.reports, GridFormat::Table));
    eprintln!(
        "report -> {} ({} generator / {} taker request(s))",
        summary.report_path.display(),
        summary.generator_requests,
        summary.taker_requests
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let ctx = Ctx {
        config: cli.config,
        seed: cli.seed,
        out_dir: cli.out_dir,
        concurrency: cli.concurrency,
        timestamp: current_timestamp(),
    };
    let result = match cli.command {
        Command::Sample(a) => cmd_sample(&ctx, a),
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Assemble(a) => cmd_assemble(&ctx, a),
        Command::Calibrate(a) => cmd_calibrate(&ctx, a),
        Command::Run(a) => cmd_run(&ctx, a),
        Command::Score(a) => cmd_score(&ctx, a),
        Command::Report(a) => cmd_report(a),
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Pipeline => cmd_pipeline(&ctx),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
