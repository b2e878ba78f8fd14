//! Chance-corrected contamination estimates.
//!
//! Cohen's kappa compares observed agreement `p_o` with the agreement expected
//! by chance `p_e`. Pinning the original instance to the slot the quiz-taker
//! selects least often bounds `p_e` by `0.25`, which gives the fixed estimator
//!
//! ```text
//! kappa_fixed = (p_o - 0.25) / 0.75
//! ```
//!
//! Because the cap is an upper bound on `p_e`, a positive `kappa_fixed` is a
//! lower bound on the contaminated fraction of the partition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::proctor::{AnswerRecord, ParsedAnswer};
use crate::quizgen::QuizKind;
use crate::slot::{Slot, SlotProbs};

/// Upper bound on chance agreement under least-preferred fixed placement.
pub const P_E_CAP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("cannot score an empty run")]
    EmptyRun,
    #[error("record {instance_id} comes from a {kind} quiz; scoring needs standard-quiz answers")]
    WrongQuizKind { instance_id: String, kind: QuizKind },
}

fn check_unit(name: &'static str, value: f64) -> Result<(), ScoringError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ScoringError::Domain {
            name,
            value,
            domain: "[0, 1]",
        })
    }
}

/// Cohen's kappa for an arbitrary chance agreement `p_e < 1`.
pub fn general_kappa(p_o: f64, p_e: f64) -> Result<f64, ScoringError> {
    check_unit("p_o", p_o)?;
    if !(0.0..1.0).contains(&p_e) {
        return Err(ScoringError::Domain {
            name: "p_e",
            value: p_e,
            domain: "[0, 1)",
        });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Kappa with `p_e` fixed at its cap of 0.25. Range `[-1/3, 1]`.
pub fn kappa_fixed(p_o: f64) -> Result<f64, ScoringError> {
    check_unit("p_o", p_o)?;
    Ok((p_o - P_E_CAP) / (1.0 - P_E_CAP))
}

/// Chance agreement `sum_s choice[s] * correct[s]`.
pub fn expected_agreement(choice: &SlotProbs, correct: &SlotProbs) -> Result<f64, ScoringError> {
    for (name, dist) in [("choice_probs", choice), ("correct_probs", correct)] {
        if !dist.is_distribution() {
            return Err(ScoringError::Domain {
                name,
                value: dist.sum(),
                domain: "probability distribution over A..D",
            });
        }
    }
    Ok(Slot::ALL.iter().map(|&s| choice.get(s) * correct.get(s)).sum())
}

/// Rounds half-up to `decimals` places.
///
/// A relative nudge of a few ulps keeps values such as `64.785` (stored as
/// `64.78499999...`) on the side a decimal reader expects.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = x * scale;
    let nudged = scaled + scaled.abs() * 4.0 * f64::EPSILON;
    (nudged + 0.5).floor() / scale
}

/// Formats a percentage at two decimals, half-up.
pub fn format_pct(x: f64) -> String {
    format!("{:.2}", round_half_up(x, 2))
}

/// Identifies the (model, dataset, split) a set of answers belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub taker_model: String,
    pub dataset: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub taker_model: String,
    pub dataset: String,
    pub split: String,
    pub n: usize,
    pub correct: usize,
    pub unparseable: usize,
    pub refused: usize,
    pub score_pct: f64,
    pub p_o: f64,
    pub p_e_cap: f64,
    /// Unclamped estimate; may be negative.
    pub kappa_fixed: f64,
    pub contamination_pct: f64,
    pub contaminated: bool,
}

impl ScoreReport {
    /// Builds a report from raw counts.
    pub fn from_counts(
        meta: ScoreMeta,
        n: usize,
        correct: usize,
        unparseable: usize,
        refused: usize,
    ) -> Result<Self, ScoringError> {
        if n == 0 {
            return Err(ScoringError::EmptyRun);
        }
        if correct > n {
            return Err(ScoringError::Domain {
                name: "correct / n",
                value: correct as f64 / n as f64,
                domain: "[0, 1]",
            });
        }
        let p_o = correct as f64 / n as f64;
        let kappa = kappa_fixed(p_o)?;
        Ok(ScoreReport {
            taker_model: meta.taker_model,
            dataset: meta.dataset,
            split: meta.split,
            n,
            correct,
            unparseable,
            refused,
            score_pct: 100.0 * p_o,
            p_o,
            p_e_cap: P_E_CAP,
            kappa_fixed: kappa,
            contamination_pct: 100.0 * kappa.max(0.0),
            contaminated: kappa > 0.0,
        })
    }

    pub fn meta(&self) -> ScoreMeta {
        ScoreMeta {
            taker_model: self.taker_model.clone(),
            dataset: self.dataset.clone(),
            split: self.split.clone(),
        }
    }
}

/// Scores one standard-quiz run. Unparseable and refused answers count as incorrect.
pub fn score_run(records: &[AnswerRecord], meta: ScoreMeta) -> Result<ScoreReport, ScoringError> {
    if records.is_empty() {
        return Err(ScoringError::EmptyRun);
    }
    let mut correct = 0;
    let mut unparseable = 0;
    let mut refused = 0;
    for record in records {
        if record.quiz_kind != QuizKind::Standard {
            return Err(ScoringError::WrongQuizKind {
                instance_id: record.instance_id.to_string(),
                kind: record.quiz_kind,
            });
        }
        match record.parsed {
            ParsedAnswer::Slot(_) if record.is_correct == Some(true) => correct += 1,
            ParsedAnswer::Slot(_) => {}
            ParsedAnswer::Unparseable => unparseable += 1,
            ParsedAnswer::Refused => refused += 1,
        }
    }
    ScoreReport::from_counts(meta, records.len(), correct, unparseable, refused)
}

/// Groups records by (taker model, dataset, split) and scores each group.
pub fn score_runs(records: &[AnswerRecord]) -> Result<Vec<ScoreReport>, ScoringError> {
    let mut groups: BTreeMap<ScoreMeta, Vec<AnswerRecord>> = BTreeMap::new();
    for record in records {
        groups
            .entry(ScoreMeta {
                taker_model: record.taker_model.clone(),
                dataset: record.dataset.clone(),
                split: record.split.clone(),
            })
            .or_default()
            .push(record.clone());
    }
    if groups.is_empty() {
        return Err(ScoringError::EmptyRun);
    }
    groups
        .into_iter()
        .map(|(meta, group)| score_run(&group, meta))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        assert_eq!(kappa_fixed(1.0).unwrap(), 1.0);
        assert_eq!(kappa_fixed(0.25).unwrap(), 0.0);
        assert!((kappa_fixed(0.60).unwrap() - 0.466_667).abs() < 1e-6);
        assert!((kappa_fixed(0.19).unwrap() + 0.08).abs() < 1e-12);
        assert!((kappa_fixed(0.0).unwrap() + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn general_kappa_examples() {
        assert!((general_kappa(0.6, 0.25).unwrap() - 0.466_667).abs() < 1e-6);
        assert_eq!(general_kappa(0.5, 0.5).unwrap(), 0.0);
        assert!((general_kappa(0.9, 0.1).unwrap() - 0.888_889).abs() < 1e-6);
        assert!(matches!(
            general_kappa(0.5, 1.0),
            Err(ScoringError::Domain { name: "p_e", .. })
        ));
    }

    #[test]
    fn domain_errors() {
        assert!(kappa_fixed(-0.01).is_err());
        assert!(kappa_fixed(1.01).is_err());
        assert!(kappa_fixed(f64::NAN).is_err());
        let bad = SlotProbs::new([0.5, 0.5, 0.5, 0.0]);
        assert!(expected_agreement(&bad, &SlotProbs::uniform()).is_err());
    }

    #[test]
    fn expected_agreement_examples() {
        let u = SlotProbs::uniform();
        assert!((expected_agreement(&u, &u).unwrap() - 0.25).abs() < 1e-15);
        let biased = SlotProbs::with_slot_weight(Slot::D, 0.03);
        let pinned = SlotProbs::point(Slot::D);
        assert!((expected_agreement(&biased, &pinned).unwrap() - 0.03).abs() < 1e-15);
        assert!((expected_agreement(&u, &pinned).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(format_pct(64.788_732), "64.79");
        assert_eq!(format_pct(53.051_643), "53.05");
        assert_eq!(format_pct(0.125 * 100.0), "12.50");
        assert_eq!(format_pct(2.675), "2.68");
        assert_eq!(format_pct(29.333_333), "29.33");
    }

    #[test]
    fn report_from_counts() {
        let meta = ScoreMeta {
            taker_model: "m".into(),
            dataset: "WNLI".into(),
            split: "validation".into(),
        };
        let r = ScoreReport::from_counts(meta.clone(), 71, 46, 0, 0).unwrap();
        assert_eq!(format_pct(r.score_pct), "64.79");
        assert_eq!(format_pct(r.contamination_pct), "53.05");
        assert!(r.contaminated);

        let floor = ScoreReport::from_counts(meta.clone(), 100, 0, 0, 0).unwrap();
        assert!((floor.kappa_fixed + 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(floor.contamination_pct, 0.0);
        assert!(!floor.contaminated);

        let ag = ScoreReport::from_counts(meta.clone(), 100, 47, 0, 0).unwrap();
        assert_eq!(format_pct(ag.contamination_pct), "29.33");

        assert_eq!(ScoreReport::from_counts(meta, 0, 0, 0, 0), Err(ScoringError::EmptyRun));
    }
}
