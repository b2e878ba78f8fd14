//! Perturbation generation and quiz assembly.
//!
//! A generator model is asked for word-level synonym substitutions of an
//! instance. Its labelled output is parsed, screened by cheap heuristics and
//! combined with the original into a four-option [`QuizItem`]. A *modified*
//! quiz replaces the original with a fourth perturbation and is used to
//! measure positional bias.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetInstance, InstanceId};
use crate::gateway::{CompletionBackend, CompletionRequest, GatewayError};
use crate::slot::Slot;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const MIN_LENGTH_RATIO: f64 = 0.6;
pub const MAX_LENGTH_RATIO: f64 = 1.6;
pub const LABEL_PREFIX: &str = "Label:";

const GENERATION_INSTRUCTION: &str = "Instruction: Your task is to create a three-choice quiz by only replacing the words in the provided text with their synonyms. The meaning and sentence structure of the three new options must exactly mirror every detail in the text. You must not include the provided text as an option. You must make sure that:\n\n(1) You generate three distinct options based on the provided text;\n\n(2) Options are ordered;\n\n(3) There is not any extra explanation; and\n\n(4) You comply with every specific symbol and letter detail in the given text.";

const EXTRA_VARIANT_INSTRUCTION: &str = "Instruction: Your task is to create one additional option by only replacing the words in the provided text with their synonyms. The meaning and sentence structure of the new option must exactly mirror every detail in the text. You must not include the provided text or any of the existing options as the new option. You must make sure that:\n\n(1) You generate one option that is distinct from the provided text and from every existing option;\n\n(2) The option is labeled D);\n\n(3) There is not any extra explanation; and\n\n(4) You comply with every specific symbol and letter detail in the given text.";

const SEPARATOR: &str = "\n\n---\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuizKind {
    Standard,
    Modified,
}

impl QuizKind {
    pub fn variant_count(self) -> usize {
        match self {
            QuizKind::Standard => 3,
            QuizKind::Modified => 4,
        }
    }
}

impl fmt::Display for QuizKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuizKind::Standard => "standard",
            QuizKind::Modified => "modified",
        })
    }
}

impl std::str::FromStr for QuizKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(QuizKind::Standard),
            "modified" => Ok(QuizKind::Modified),
            other => Err(format!("unknown quiz kind {other:?} (expected standard or modified)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("generator output is empty")]
    Empty,
    #[error("option marker {0}) not found")]
    MissingMarker(Slot),
    #[error("option {0}) has an empty body")]
    EmptyOption(Slot),
    #[error("more options than the {0} requested")]
    ExtraOption(usize),
    #[error("unsupported option count {0}")]
    BadCount(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum QuizgenError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(
        "instance {instance_id}: no valid perturbations after {attempts} attempt(s); last failure: {last_failure}"
    )]
    GenerationExhausted {
        instance_id: String,
        attempts: u32,
        last_failure: String,
    },
    #[error("{kind} quiz needs {expected} variants, got {got}")]
    Arity {
        kind: QuizKind,
        expected: usize,
        got: usize,
    },
    #[error("variant count must be 3 or 4, got {0}")]
    InvalidCount(usize),
    #[error("instance {instance_id}: {message}")]
    InvalidQuiz { instance_id: String, message: String },
}

/// Word-level perturbations of one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSet {
    pub instance_id: InstanceId,
    pub variants: Vec<String>,
    pub generator_model: String,
    /// Always true: generation samples at temperature 1.0.
    #[serde(default = "seedless")]
    pub generation_seedless: bool,
}

fn seedless() -> bool {
    true
}

impl PerturbationSet {
    /// The first three variants, as used by a standard quiz.
    pub fn standard_subset(&self) -> PerturbationSet {
        PerturbationSet {
            variants: self.variants.iter().take(3).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Four option texts keyed by slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizOptions {
    #[serde(rename = "A")]
    pub a: String,
    #[serde(rename = "B")]
    pub b: String,
    #[serde(rename = "C")]
    pub c: String,
    #[serde(rename = "D")]
    pub d: String,
}

impl QuizOptions {
    pub fn from_array(options: [String; 4]) -> Self {
        let [a, b, c, d] = options;
        QuizOptions { a, b, c, d }
    }

    pub fn get(&self, slot: Slot) -> &str {
        match slot {
            Slot::A => &self.a,
            Slot::B => &self.b,
            Slot::C => &self.c,
            Slot::D => &self.d,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Slot, &str)> {
        Slot::ALL.into_iter().map(move |s| (s, self.get(s)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizItem {
    pub instance_id: InstanceId,
    pub dataset: String,
    pub split: String,
    pub quiz_kind: QuizKind,
    pub options: QuizOptions,
    pub correct_slot: Option<Slot>,
    pub generator_model: String,
}

impl QuizItem {
    /// Checks the structural invariants; `original` enables the placement checks.
    pub fn check(&self, original: Option<&str>) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (slot, text) in self.options.iter() {
            if text.trim().is_empty() {
                return Err(format!("option {slot} is empty"));
            }
            if !seen.insert(text) {
                return Err(format!("option {slot} duplicates another option"));
            }
        }
        match (self.quiz_kind, self.correct_slot) {
            (QuizKind::Standard, None) => return Err("standard quiz without a correct slot".into()),
            (QuizKind::Modified, Some(_)) => return Err("modified quiz must not have a correct slot".into()),
            _ => {}
        }
        if let Some(original) = original {
            let hits: Vec<Slot> = self
                .options
                .iter()
                .filter(|(_, t)| *t == original)
                .map(|(s, _)| s)
                .collect();
            match self.quiz_kind {
                QuizKind::Standard if hits != self.correct_slot.into_iter().collect::<Vec<_>>() => {
                    return Err(format!("original found at {hits:?}, expected {:?}", self.correct_slot));
                }
                QuizKind::Modified if !hits.is_empty() => {
                    return Err("modified quiz contains the original".into());
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Where the original instance goes in a standard quiz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    pub fixed_slot: Slot,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        PlacementPolicy { fixed_slot: Slot::D }
    }
}

impl PlacementPolicy {
    /// Probability that each slot holds the correct answer: 1 at the fixed slot.
    pub fn correct_probs(&self) -> crate::slot::SlotProbs {
        crate::slot::SlotProbs::point(self.fixed_slot)
    }
}

/// Prompt asking the generator for three perturbed options of `original`.
pub fn build_generation_prompt(original: &DatasetInstance) -> String {
    format!(
        "{GENERATION_INSTRUCTION}{SEPARATOR}Text:\n\n{}\n\n---\n",
        original.rendered_text
    )
}

/// Prompt asking for one more option distinct from `existing`, labelled `D)`.
pub fn build_extra_variant_prompt(original: &DatasetInstance, existing: &[String]) -> String {
    let listed = existing
        .iter()
        .zip(Slot::ALL)
        .map(|(body, slot)| format!("{} {}", slot.marker(), body))
        .collect::<Vec<_>>()
        .join("\n\n");
    format!(
        "{EXTRA_VARIANT_INSTRUCTION}{SEPARATOR}Text:\n\n{}{SEPARATOR}Existing options:\n\n{}\n\n---\n",
        original.rendered_text, listed
    )
}

/// Joins option bodies with `A)`, `B)`, ... markers, one option per block.
pub fn join_options(bodies: &[String], slots: &[Slot]) -> String {
    bodies
        .iter()
        .zip(slots)
        .map(|(body, slot)| format!("{} {}", slot.marker(), body))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Splits generator output on line-initial markers for `slots`, in order.
///
/// Text before the first marker is ignored. A line-initial marker for the
/// slot right after the last expected one is rejected as an extra option.
pub fn parse_options(raw: &str, slots: &[Slot]) -> Result<Vec<String>, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let overflow = slots
        .last()
        .and_then(|s| Slot::from_index(s.index() + 1))
        .map(|s| s.marker());
    let mut bodies: Vec<String> = Vec::with_capacity(slots.len());
    for line in raw.lines() {
        let trimmed = line.trim_start();
        if let Some(slot) = slots.get(bodies.len()) {
            if let Some(rest) = trimmed.strip_prefix(&slot.marker()) {
                bodies.push(rest.to_string());
                continue;
            }
        } else if overflow.as_deref().is_some_and(|m| trimmed.starts_with(m)) {
            return Err(ParseError::ExtraOption(slots.len()));
        }
        if let Some(current) = bodies.last_mut() {
            current.push('\n');
            current.push_str(line.trim_end());
        }
    }
    if bodies.len() < slots.len() {
        return Err(ParseError::MissingMarker(slots[bodies.len()]));
    }
    bodies
        .into_iter()
        .zip(slots)
        .map(|(body, slot)| {
            let body = body.trim().to_string();
            if body.is_empty() {
                Err(ParseError::EmptyOption(*slot))
            } else {
                Ok(body)
            }
        })
        .collect()
}

/// Parses `A) ... B) ... C) ...` (plus `D)` when `expected_count` is 4).
pub fn parse_variants(raw: &str, expected_count: usize) -> Result<Vec<String>, ParseError> {
    if !(1..=4).contains(&expected_count) {
        return Err(ParseError::BadCount(expected_count));
    }
    parse_options(raw, &Slot::ALL[..expected_count])
}

/// Why a variant was rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    Empty {
        variant: usize,
    },
    IdenticalToOriginal {
        variant: usize,
    },
    Duplicate {
        variant: usize,
        of: usize,
    },
    LabelNotPreserved {
        variant: usize,
        label: String,
    },
    LengthRatio {
        variant: usize,
        ratio: f64,
    },
    LineCount {
        variant: usize,
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Empty { variant } => write!(f, "variant {variant}: empty"),
            RejectReason::IdenticalToOriginal { variant } => write!(f, "variant {variant}: identical to original"),
            RejectReason::Duplicate { variant, of } => write!(f, "variant {variant}: duplicate of variant {of}"),
            RejectReason::LabelNotPreserved { variant, label } => {
                write!(f, "variant {variant}: label not preserved ({label:?})")
            }
            RejectReason::LengthRatio { variant, ratio } => write!(
                f,
                "variant {variant}: length ratio {ratio:.3} outside [{MIN_LENGTH_RATIO}, {MAX_LENGTH_RATIO}]"
            ),
            RejectReason::LineCount { variant, expected, got } => {
                write!(f, "variant {variant}: {got} non-blank lines, original has {expected}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
}

impl fmt::Display for ValidationVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.accepted {
            return f.write_str("accepted");
        }
        let reasons: Vec<String> = self.reasons.iter().map(|r| r.to_string()).collect();
        write!(f, "rejected: {}", reasons.join("; "))
    }
}

fn label_lines(text: &str) -> Vec<&str> {
    text.lines()
        .map(str::trim)
        .filter(|l| l.starts_with(LABEL_PREFIX))
        .collect()
}

fn content_lines(text: &str) -> usize {
    text.lines().filter(|l| !l.trim().is_empty()).count()
}

/// Heuristic screen: distinctness, verbatim label lines, length ratio and line count.
pub fn validate_variants(original: &DatasetInstance, variants: &[String]) -> ValidationVerdict {
    let orig = original.rendered_text.as_str();
    let orig_len = orig.chars().count().max(1) as f64;
    let orig_lines = content_lines(orig);
    let labels = label_lines(orig);
    let mut reasons = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        if v.trim().is_empty() {
            reasons.push(RejectReason::Empty { variant: i });
            continue;
        }
        if v == orig {
            reasons.push(RejectReason::IdenticalToOriginal { variant: i });
        }
        if let Some(j) = variants[..i].iter().position(|w| w == v) {
            reasons.push(RejectReason::Duplicate { variant: i, of: j });
        }
        let present: BTreeSet<&str> = v.lines().map(str::trim).collect();
        for label in &labels {
            if !present.contains(label) {
                reasons.push(RejectReason::LabelNotPreserved {
                    variant: i,
                    label: label.to_string(),
                });
            }
        }
        let ratio = v.chars().count() as f64 / orig_len;
        if !(MIN_LENGTH_RATIO..=MAX_LENGTH_RATIO).contains(&ratio) {
            reasons.push(RejectReason::LengthRatio { variant: i, ratio });
        }
        let lines = content_lines(v);
        if lines != orig_lines {
            reasons.push(RejectReason::LineCount {
                variant: i,
                expected: orig_lines,
                got: lines,
            });
        }
    }
    ValidationVerdict {
        accepted: reasons.is_empty(),
        reasons,
    }
}

fn request_until_valid(
    backend: &dyn CompletionBackend,
    original: &DatasetInstance,
    prompt: &str,
    max_attempts: u32,
    mut accept: impl FnMut(&str) -> Result<Vec<String>, String>,
) -> Result<Vec<String>, QuizgenError> {
    let mut last_failure = String::from("no attempts made");
    for attempt in 1..=max_attempts {
        let response = backend.complete(&CompletionRequest::generation(prompt))?;
        match accept(&response.text) {
            Ok(v) => return Ok(v),
            Err(why) => {
                log::warn!(
                    "instance {}: generation attempt {attempt}/{max_attempts} rejected: {why}",
                    original.instance_id
                );
                last_failure = why;
            }
        }
    }
    Err(QuizgenError::GenerationExhausted {
        instance_id: original.instance_id.to_string(),
        attempts: max_attempts,
        last_failure,
    })
}

/// Generates `count` (3 or 4) validated perturbations of `original`.
///
/// The fourth variant comes from a follow-up prompt listing the three
/// accepted ones. Each phase gets up to `max_attempts` requests.
pub fn generate_perturbations(
    backend: &dyn CompletionBackend,
    original: &DatasetInstance,
    count: usize,
    max_attempts: u32,
) -> Result<PerturbationSet, QuizgenError> {
    if count != 3 && count != 4 {
        return Err(QuizgenError::InvalidCount(count));
    }
    let max_attempts = max_attempts.max(1);
    let prompt = build_generation_prompt(original);
    let mut variants = request_until_valid(backend, original, &prompt, max_attempts, |raw| {
        let parsed = parse_variants(raw, 3).map_err(|e| e.to_string())?;
        let verdict = validate_variants(original, &parsed);
        if verdict.accepted {
            Ok(parsed)
        } else {
            Err(verdict.to_string())
        }
    })?;
    if count == 4 {
        let prompt = build_extra_variant_prompt(original, &variants);
        let extra = request_until_valid(backend, original, &prompt, max_attempts, |raw| {
            let parsed = parse_options(raw, &[Slot::D]).map_err(|e| e.to_string())?;
            let mut all = variants.clone();
            all.extend(parsed);
            let verdict = validate_variants(original, &all);
            if verdict.accepted {
                Ok(all)
            } else {
                Err(verdict.to_string())
            }
        })?;
        variants = extra;
    }
    Ok(PerturbationSet {
        instance_id: original.instance_id.clone(),
        variants,
        generator_model: backend.model_id().to_string(),
        generation_seedless: true,
    })
}

/// Places the options of one quiz.
///
/// Standard: the original sits at `policy.fixed_slot`; the three variants,
/// sorted by text, fill the remaining slots alphabetically. Modified: the four
/// variants, sorted, fill `A`..`D` and there is no correct slot.
pub fn assemble_quiz(
    original: &DatasetInstance,
    perturbations: &PerturbationSet,
    policy: PlacementPolicy,
    kind: QuizKind,
) -> Result<QuizItem, QuizgenError> {
    let expected = kind.variant_count();
    if perturbations.variants.len() != expected {
        return Err(QuizgenError::Arity {
            kind,
            expected,
            got: perturbations.variants.len(),
        });
    }
    let mut sorted = perturbations.variants.clone();
    sorted.sort();
    let mut slots: [String; 4] = Default::default();
    let correct_slot = match kind {
        QuizKind::Standard => {
            slots[policy.fixed_slot.index()] = original.rendered_text.clone();
            let free = Slot::ALL.into_iter().filter(|s| *s != policy.fixed_slot);
            for (slot, text) in free.zip(sorted) {
                slots[slot.index()] = text;
            }
            Some(policy.fixed_slot)
        }
        QuizKind::Modified => {
            for (slot, text) in slots.iter_mut().zip(sorted) {
                *slot = text;
            }
            None
        }
    };
    let item = QuizItem {
        instance_id: original.instance_id.clone(),
        dataset: original.dataset.clone(),
        split: original.split.clone(),
        quiz_kind: kind,
        options: QuizOptions::from_array(slots),
        correct_slot,
        generator_model: perturbations.generator_model.clone(),
    };
    item.check(Some(&original.rendered_text))
        .map_err(|message| QuizgenError::InvalidQuiz {
            instance_id: original.instance_id.to_string(),
            message,
        })?;
    Ok(item)
}
