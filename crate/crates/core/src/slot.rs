//! Option slots `A`..`D` and distributions over them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the four option positions of a quiz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
    C,
    D,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::A, Slot::B, Slot::C, Slot::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Slot> {
        Slot::ALL.get(idx).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    /// Case-insensitive conversion from a single letter.
    pub fn from_letter(c: char) -> Option<Slot> {
        match c.to_ascii_uppercase() {
            'A' => Some(Slot::A),
            'B' => Some(Slot::B),
            'C' => Some(Slot::C),
            'D' => Some(Slot::D),
            _ => None,
        }
    }

    /// The option marker used in prompts and generator output, e.g. `"C)"`.
    pub fn marker(self) -> String {
        format!("{})", self.letter())
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not an option slot: {0:?}")]
pub struct ParseSlotError(pub String);

impl FromStr for Slot {
    type Err = ParseSlotError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Slot::from_letter(c).ok_or_else(|| ParseSlotError(s.to_string())),
            _ => Err(ParseSlotError(s.to_string())),
        }
    }
}

/// Tolerance used when checking that probabilities sum to one.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// A probability (or frequency) assigned to each of the four slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotProbs {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

impl SlotProbs {
    pub fn new(values: [f64; 4]) -> Self {
        let [a, b, c, d] = values;
        SlotProbs { a, b, c, d }
    }

    pub fn uniform() -> Self {
        SlotProbs::new([0.25; 4])
    }

    /// All mass on `slot`.
    pub fn point(slot: Slot) -> Self {
        let mut values = [0.0; 4];
        values[slot.index()] = 1.0;
        SlotProbs::new(values)
    }

    /// `weight` on `slot`, the remainder split evenly over the other three.
    pub fn with_slot_weight(slot: Slot, weight: f64) -> Self {
        let rest = (1.0 - weight) / 3.0;
        let mut values = [rest; 4];
        values[slot.index()] = weight;
        SlotProbs::new(values)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn get(&self, slot: Slot) -> f64 {
        self.to_array()[slot.index()]
    }

    pub fn sum(&self) -> f64 {
        self.to_array().iter().sum()
    }

    /// True when every entry is finite and non-negative and the entries sum to one.
    pub fn is_distribution(&self) -> bool {
        let values = self.to_array();
        values.iter().all(|p| p.is_finite() && *p >= 0.0) && (self.sum() - 1.0).abs() <= DISTRIBUTION_TOLERANCE
    }
}
