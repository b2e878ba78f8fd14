//! Contamination quizzes for language models.
//!
//! Each sampled dataset instance is turned into a four-option quiz: the
//! original text plus three word-level synonym perturbations. A model that
//! picks the original more often than chance has likely seen the partition
//! during pre-training. The pipeline is
//!
//! 1. [`corpus`]: render and sample instances;
//! 2. [`quizgen`]: generate perturbations and assemble quizzes;
//! 3. [`calibration`]: measure positional bias with a modified quiz;
//! 4. [`proctor`]: administer quizzes and parse answers;
//! 5. [`scoring`]: turn answers into `kappa_fixed` contamination estimates.
//!
//! [`simlab`] checks the estimator by simulation, [`gateway`] talks to model
//! endpoints, and [`pipeline`] wires the stages together over files.

pub mod artifact;
pub mod calibration;
pub mod corpus;
pub mod gateway;
pub mod mock;
pub mod pipeline;
pub mod proctor;
pub mod quizgen;
pub mod report;
pub mod scoring;
pub mod seeding;
pub mod simlab;
pub mod slot;

pub use calibration::{compute_bias_profile, derive_placement, BiasProfile, SlotCounts};
pub use corpus::{render_instance, sample_partition, DatasetConfig, DatasetInstance, InstanceId, TaskFamily};
pub use gateway::{CompletionBackend, CompletionRequest, CompletionResponse, GatewayError, ScriptedBackend};
pub use proctor::{administer, build_quiz_prompt, parse_answer, AnswerRecord, ParsedAnswer};
pub use quizgen::{
    assemble_quiz, build_generation_prompt, generate_perturbations, parse_variants, validate_variants, PerturbationSet,
    PlacementPolicy, QuizItem, QuizKind,
};
pub use scoring::{expected_agreement, general_kappa, kappa_fixed, score_run, ScoreReport};
pub use simlab::{estimator_sweep, SweepConfig, SweepRow, SyntheticTaker};
pub use slot::{Slot, SlotProbs};
