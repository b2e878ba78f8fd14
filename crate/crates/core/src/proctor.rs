//! Quiz administration and answer parsing.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::InstanceId;
use crate::gateway::{CompletionBackend, CompletionRequest, GatewayError};
use crate::quizgen::{QuizItem, QuizKind};
use crate::slot::Slot;

#[derive(Debug, thiserror::Error)]
pub enum ProctorError {
    #[error("quiz mixes {0} and {1} items")]
    MixedQuizKinds(QuizKind, QuizKind),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

/// Outcome of parsing one response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParsedAnswer {
    Slot(Slot),
    Unparseable,
    /// The provider's content filter blocked the answer.
    Refused,
}

impl ParsedAnswer {
    pub fn slot(self) -> Option<Slot> {
        match self {
            ParsedAnswer::Slot(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ParsedAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParsedAnswer::Slot(s) => write!(f, "{s}"),
            ParsedAnswer::Unparseable => f.write_str("unparseable"),
            ParsedAnswer::Refused => f.write_str("refused"),
        }
    }
}

impl Serialize for ParsedAnswer {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParsedAnswer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        match s.as_str() {
            "unparseable" => Ok(ParsedAnswer::Unparseable),
            "refused" => Ok(ParsedAnswer::Refused),
            other => other
                .parse::<Slot>()
                .map(ParsedAnswer::Slot)
                .map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub instance_id: InstanceId,
    pub dataset: String,
    pub split: String,
    pub quiz_kind: QuizKind,
    pub taker_model: String,
    pub raw_response: String,
    pub parsed: ParsedAnswer,
    /// Set only for standard quizzes with a parsed slot.
    pub is_correct: Option<bool>,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Renders a quiz as a single zero-shot prompt.
pub fn build_quiz_prompt(item: &QuizItem, dataset_name: &str, split_name: &str) -> String {
    let options = item
        .options
        .iter()
        .map(|(slot, text)| format!("{} {}", slot.marker(), text))
        .collect::<Vec<_>>()
        .join("\n\n");
    format!(
        "Instruction: Your task is to accurately select the option that corresponds exactly to an instance from the {split_name} split of the {dataset_name} dataset. Only generate a single option letter as your answer.\n\n---\n\n{options}\n\n---\n\nAnswer:"
    )
}

const OPTION_PUNCT: &[char] = &['(', ')', '.', ':', ',', ';', '[', ']', '*', '"', '\'', '`'];

/// A whitespace token that names a slot: a letter, optionally wrapped in
/// option punctuation. Bare lowercase letters only count when `lenient_case`
/// (so the article "a" later in a response is not read as an option).
fn token_slot(token: &str, lenient_case: bool) -> Option<Slot> {
    let core = token.trim_matches(OPTION_PUNCT);
    let mut chars = core.chars();
    let c = match (chars.next(), chars.next()) {
        (Some(c), None) => c,
        _ => return None,
    };
    let punctuated = core.len() != token.len();
    if c.is_ascii_uppercase() || lenient_case || punctuated {
        Slot::from_letter(c)
    } else {
        None
    }
}

/// Extracts the committed option letter from a quiz response.
///
/// Accepted shapes (case-insensitive, surrounding whitespace ignored): `D`,
/// `D)`, `D.`, `(D)`, `Option D`, optionally after `Answer:`. The response
/// must open with one of these and must not name a second, different letter.
pub fn parse_answer(raw: &str) -> ParsedAnswer {
    let mut tokens = raw.split_whitespace().peekable();
    let mut first = tokens.next();
    if let Some(t) = first {
        if t.eq_ignore_ascii_case("answer:") {
            first = tokens.next();
        }
    }
    if let Some(t) = first {
        if t.trim_end_matches(':').eq_ignore_ascii_case("option") {
            first = tokens.next();
        }
    }
    let Some(committed) = first.and_then(|t| token_slot(t, true)) else {
        return ParsedAnswer::Unparseable;
    };
    for t in tokens {
        if let Some(other) = token_slot(t, false) {
            if other != committed {
                return ParsedAnswer::Unparseable;
            }
        }
    }
    ParsedAnswer::Slot(committed)
}

fn answer_one(backend: &dyn CompletionBackend, item: &QuizItem, dataset_name: &str, split_name: &str) -> AnswerRecord {
    let prompt = build_quiz_prompt(item, dataset_name, split_name);
    let (raw_response, parsed, latency_ms, error) = match backend.complete(&CompletionRequest::quiz(prompt)) {
        Ok(resp) => {
            let parsed = parse_answer(&resp.text);
            (resp.text, parsed, resp.latency_ms, None)
        }
        Err(GatewayError::Filtered(msg)) => (String::new(), ParsedAnswer::Refused, 0, Some(msg)),
        Err(e) => (String::new(), ParsedAnswer::Unparseable, 0, Some(e.to_string())),
    };
    let is_correct = match (item.quiz_kind, parsed, item.correct_slot) {
        (QuizKind::Standard, ParsedAnswer::Slot(s), Some(correct)) => Some(s == correct),
        _ => None,
    };
    AnswerRecord {
        instance_id: item.instance_id.clone(),
        dataset: item.dataset.clone(),
        split: item.split.clone(),
        quiz_kind: item.quiz_kind,
        taker_model: backend.model_id().to_string(),
        raw_response,
        parsed,
        is_correct,
        latency_ms,
        error,
    }
}

/// Sends every item once (temperature 0, five new tokens) and records the answers.
///
/// Gateway failures become `unparseable` records carrying the error text, and
/// content-filter outcomes become `refused`; the run always yields one record
/// per item, sorted by instance id.
pub fn administer(
    backend: &dyn CompletionBackend,
    quiz: &[QuizItem],
    dataset_name: &str,
    split_name: &str,
    concurrency: usize,
) -> Result<Vec<AnswerRecord>, ProctorError> {
    if let Some(first) = quiz.first() {
        if let Some(other) = quiz.iter().find(|q| q.quiz_kind != first.quiz_kind) {
            return Err(ProctorError::MixedQuizKinds(first.quiz_kind, other.quiz_kind));
        }
    }
    let workers = concurrency.min(backend.max_in_flight()).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ProctorError::Pool(e.to_string()))?;
    let mut records: Vec<AnswerRecord> = pool.install(|| {
        quiz.par_iter()
            .map(|item| answer_one(backend, item, dataset_name, split_name))
            .collect()
    });
    records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(records)
}
