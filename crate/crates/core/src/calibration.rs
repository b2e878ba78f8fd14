//! Positional-bias calibration from modified-quiz answers.
//!
//! With the original absent, any preference among slots is pure position
//! bias. The slot chosen least often is where the original goes in the
//! standard quiz, which keeps chance agreement at or below 0.25.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::proctor::{AnswerRecord, ParsedAnswer};
use crate::quizgen::{PlacementPolicy, QuizKind};
use crate::slot::{Slot, SlotProbs};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CalibrationError {
    #[error("no parsed answers to calibrate from")]
    NoParsedAnswers,
    #[error("record {0} comes from a standard quiz; calibration needs modified-quiz answers")]
    WrongQuizKind(String),
    #[error("records mix taker models {0:?} and {1:?}")]
    MixedModels(String, String),
}

/// Selection counts per slot, always listing all four slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SlotCounts {
    #[serde(rename = "A")]
    pub a: u64,
    #[serde(rename = "B")]
    pub b: u64,
    #[serde(rename = "C")]
    pub c: u64,
    #[serde(rename = "D")]
    pub d: u64,
}

impl SlotCounts {
    pub fn new(counts: [u64; 4]) -> Self {
        let [a, b, c, d] = counts;
        SlotCounts { a, b, c, d }
    }

    pub fn to_array(self) -> [u64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn get(&self, slot: Slot) -> u64 {
        self.to_array()[slot.index()]
    }

    pub fn add(&mut self, slot: Slot) {
        match slot {
            Slot::A => self.a += 1,
            Slot::B => self.b += 1,
            Slot::C => self.c += 1,
            Slot::D => self.d += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.to_array().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub taker_model: String,
    pub counts: SlotCounts,
    #[serde(default)]
    pub unparseable_count: u64,
    pub frequencies: SlotProbs,
    pub least_preferred: Slot,
}

impl BiasProfile {
    /// Frequencies over parsed answers; the least-preferred slot is the last
    /// slot attaining the minimum count.
    pub fn from_counts(
        taker_model: impl Into<String>,
        counts: SlotCounts,
        unparseable_count: u64,
    ) -> Result<Self, CalibrationError> {
        let total = counts.total();
        if total == 0 {
            return Err(CalibrationError::NoParsedAnswers);
        }
        let arr = counts.to_array();
        let frequencies = SlotProbs::new(arr.map(|c| c as f64 / total as f64));
        let min = *arr.iter().min().expect("four slots");
        let least_preferred = Slot::ALL
            .into_iter()
            .rev()
            .find(|s| counts.get(*s) == min)
            .expect("some slot attains the minimum");
        Ok(BiasProfile {
            taker_model: taker_model.into(),
            counts,
            unparseable_count,
            frequencies,
            least_preferred,
        })
    }
}

/// Tallies a modified-quiz run. Unparseable and refused answers are counted
/// separately and excluded from the frequencies.
pub fn compute_bias_profile(records: &[AnswerRecord]) -> Result<BiasProfile, CalibrationError> {
    let mut counts = SlotCounts::default();
    let mut unparseable = 0;
    let mut model: Option<&str> = None;
    for record in records {
        if record.quiz_kind != QuizKind::Modified {
            return Err(CalibrationError::WrongQuizKind(record.instance_id.to_string()));
        }
        match model {
            None => model = Some(&record.taker_model),
            Some(m) if m != record.taker_model => {
                return Err(CalibrationError::MixedModels(m.to_string(), record.taker_model.clone()))
            }
            Some(_) => {}
        }
        match record.parsed {
            ParsedAnswer::Slot(s) => counts.add(s),
            ParsedAnswer::Unparseable | ParsedAnswer::Refused => unparseable += 1,
        }
    }
    BiasProfile::from_counts(model.unwrap_or_default(), counts, unparseable)
}

/// One profile per (dataset, split) partition.
pub fn profiles_by_partition(
    records: &[AnswerRecord],
) -> Result<BTreeMap<(String, String), BiasProfile>, CalibrationError> {
    let mut groups: BTreeMap<(String, String), Vec<AnswerRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.clone(), r.split.clone()))
            .or_default()
            .push(r.clone());
    }
    groups
        .into_iter()
        .map(|(key, group)| compute_bias_profile(&group).map(|p| (key, p)))
        .collect()
}

pub fn derive_placement(profile: &BiasProfile) -> PlacementPolicy {
    PlacementPolicy {
        fixed_slot: profile.least_preferred,
    }
}
