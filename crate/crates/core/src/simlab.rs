//! Monte Carlo checks of the contamination estimator.
//!
//! A synthetic quiz-taker memorized a fraction `m` of the partition: with
//! probability `m` it picks the correct slot, otherwise it guesses from a
//! positional-bias distribution. Then `E[p_o] = m + (1 - m) * bias[correct]`
//! and `E[kappa_fixed] = (E[p_o] - 0.25) / 0.75`, which equals `m` exactly when
//! the bias at the correct slot is 0.25 and falls below `m` when it is smaller.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::quizgen::QuizItem;
use crate::scoring::kappa_fixed;
use crate::seeding::{derive_seed, STREAM_SIMULATION};
use crate::slot::{Slot, SlotProbs};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("memorization rate {0} outside [0, 1]")]
    Rate(f64),
    #[error("guess bias is not a probability distribution: {0:?}")]
    Bias(SlotProbs),
    #[error("n and trials must be at least 1")]
    Size,
}

/// Memorize-or-guess quiz-taker.
#[derive(Debug, Clone)]
pub struct SyntheticTaker {
    pub memorization_rate: f64,
    pub guess_bias: SlotProbs,
    pub rng_seed: u64,
    rng: ChaCha8Rng,
    guess: WeightedIndex<f64>,
}

impl SyntheticTaker {
    pub fn new(memorization_rate: f64, guess_bias: SlotProbs, rng_seed: u64) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&memorization_rate) {
            return Err(SimError::Rate(memorization_rate));
        }
        if !guess_bias.is_distribution() {
            return Err(SimError::Bias(guess_bias));
        }
        let guess = WeightedIndex::new(guess_bias.to_array()).map_err(|_| SimError::Bias(guess_bias))?;
        Ok(SyntheticTaker {
            memorization_rate,
            guess_bias,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            guess,
        })
    }

    /// Answers a quiz whose correct option is at `correct` (if any).
    pub fn answer(&mut self, correct: Option<Slot>) -> Slot {
        if let Some(correct) = correct {
            if self.rng.random::<f64>() < self.memorization_rate {
                return correct;
            }
        }
        Slot::from_index(self.guess.sample(&mut self.rng)).expect("weights cover four slots")
    }

    /// Memorized items resolve to the correct slot; modified items are pure guesses.
    pub fn simulate_answer(&mut self, item: &QuizItem) -> Slot {
        self.answer(item.correct_slot)
    }
}

/// Closed-form mean of `kappa_fixed` for a memorize-or-guess taker.
pub fn expected_kappa(m: f64, bias_at_correct: f64) -> f64 {
    (m + (1.0 - m) * bias_at_correct - 0.25) / 0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: f64,
    pub bias: SlotProbs,
    pub mean_kappa: f64,
    pub std_kappa: f64,
    pub trials: usize,
    pub n: usize,
}

impl SweepRow {
    pub fn expected_kappa(&self, correct: Slot) -> f64 {
        expected_kappa(self.m, self.bias.get(correct))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub m_values: Vec<f64>,
    pub bias_values: Vec<SlotProbs>,
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    /// Slot holding the original in every simulated quiz.
    pub correct_slot: Slot,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            m_values: (0..=10).map(|i| i as f64 / 10.0).collect(),
            bias_values: [0.03, 0.10, 0.25, 0.40]
                .into_iter()
                .map(|b| SlotProbs::with_slot_weight(Slot::D, b))
                .collect(),
            n: 100,
            trials: 1000,
            seed: 7,
            correct_slot: Slot::D,
        }
    }
}

fn run_trial(m: f64, bias: SlotProbs, n: usize, correct: Slot, seed: u64) -> f64 {
    let mut taker = SyntheticTaker::new(m, bias, seed).expect("validated by caller");
    let hits = (0..n).filter(|_| taker.answer(Some(correct)) == correct).count();
    kappa_fixed(hits as f64 / n as f64).expect("fraction lies in [0, 1]")
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `trials` simulated quizzes of `n` items for each (m, bias) cell.
///
/// Each trial draws from its own stream seeded by `(seed, cell, trial)`, so the
/// table is identical regardless of thread scheduling.
pub fn estimator_sweep(config: &SweepConfig) -> Result<Vec<SweepRow>, SimError> {
    if config.n == 0 || config.trials == 0 {
        return Err(SimError::Size);
    }
    for &m in &config.m_values {
        if !(0.0..=1.0).contains(&m) {
            return Err(SimError::Rate(m));
        }
    }
    for bias in &config.bias_values {
        if !bias.is_distribution() {
            return Err(SimError::Bias(*bias));
        }
    }
    let mut rows = Vec::with_capacity(config.m_values.len() * config.bias_values.len());
    for (bi, bias) in config.bias_values.iter().enumerate() {
        for (mi, &m) in config.m_values.iter().enumerate() {
            let cell = (bi * config.m_values.len() + mi) as u64;
            let kappas: Vec<f64> = (0..config.trials)
                .into_par_iter()
                .map(|t| {
                    let seed = derive_seed(config.seed, STREAM_SIMULATION, &[cell, t as u64]);
                    run_trial(m, *bias, config.n, config.correct_slot, seed)
                })
                .collect();
            let (mean_kappa, std_kappa) = mean_std(&kappas);
            rows.push(SweepRow {
                m,
                bias: *bias,
                mean_kappa,
                std_kappa,
                trials: config.trials,
                n: config.n,
            });
        }
    }
    Ok(rows)
}

/// CSV with columns `m,bias_A,bias_B,bias_C,bias_D,mean_kappa,std_kappa,trials,n`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "m",
            "bias_A",
            "bias_B",
            "bias_C",
            "bias_D",
            "mean_kappa",
            "std_kappa",
            "trials",
            "n",
        ])
        .expect("in-memory write");
    for r in rows {
        let [a, b, c, d] = r.bias.to_array();
        writer
            .write_record([
                r.m.to_string(),
                a.to_string(),
                b.to_string(),
                c.to_string(),
                d.to_string(),
                format!("{:.6}", r.mean_kappa),
                format!("{:.6}", r.std_kappa),
                r.trials.to_string(),
                r.n.to_string(),
            ])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("flush to vec")).expect("csv is utf-8")
}
