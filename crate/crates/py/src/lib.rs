//! Python bindings: estimator, parsing, quiz assembly, calibration,
//! simulation and the file-based pipeline.
//!
//! Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use dcq_core::artifact::current_timestamp;
use dcq_core::calibration::{BiasProfile, SlotCounts};
use dcq_core::mock;
use dcq_core::pipeline::{run_pipeline, PlacementSource, RunConfig};
use dcq_core::quizgen::{self, PerturbationSet, QuizOptions};
use dcq_core::report::{render_grid, GridFormat, ReportFile};
use dcq_core::scoring::{self, ScoreMeta, ScoreReport};
use dcq_core::simlab::{self, SweepConfig};
use dcq_core::{DatasetInstance, InstanceId, PlacementPolicy, QuizItem, QuizKind, Slot, SlotProbs};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde_json::Value;

create_exception!(
    dcq,
    PipelineFailure,
    PyException,
    "A pipeline stage failed; `args[1]` is the CLI exit code."
);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, value: &Value) -> PyResult<Py<PyAny>> {
    Ok(match value {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_py_any(py)?,
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_py_any(py)?,
            (None, Some(u)) => u.into_py_any(py)?,
            _ => n.as_f64().unwrap_or(f64::NAN).into_py_any(py)?,
        },
        Value::String(s) => s.into_py_any(py)?,
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_py_any(py)?
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, to_py(py, v)?)?;
            }
            dict.into_py_any(py)?
        }
    })
}

fn ser_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(value_err)?)
}

fn parse_slot(s: &str) -> PyResult<Slot> {
    s.parse().map_err(value_err)
}

fn parse_kind(s: &str) -> PyResult<QuizKind> {
    s.parse().map_err(value_err)
}

fn probs(values: [f64; 4]) -> SlotProbs {
    SlotProbs::new(values)
}

fn instance(text: &str, dataset: &str, split: &str) -> DatasetInstance {
    DatasetInstance {
        instance_id: InstanceId("0".into()),
        dataset: dataset.into(),
        split: split.into(),
        rendered_text: text.into(),
        source_fields: Default::default(),
    }
}

/// `(p_o - 0.25) / 0.75`.
#[pyfunction]
fn kappa_fixed(p_o: f64) -> PyResult<f64> {
    scoring::kappa_fixed(p_o).map_err(value_err)
}

/// `(p_o - p_e) / (1 - p_e)`.
#[pyfunction]
fn general_kappa(p_o: f64, p_e: f64) -> PyResult<f64> {
    scoring::general_kappa(p_o, p_e).map_err(value_err)
}

/// Chance agreement of two slot distributions, each `[A, B, C, D]`.
#[pyfunction]
fn expected_agreement(choice: [f64; 4], correct: [f64; 4]) -> PyResult<f64> {
    scoring::expected_agreement(&probs(choice), &probs(correct)).map_err(value_err)
}

/// Two decimals, half-up.
#[pyfunction]
fn format_pct(x: f64) -> String {
    scoring::format_pct(x)
}

/// Score report dict for `correct` of `n` answers.
#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (n, correct, unparseable=0, refused=0, taker_model="taker", dataset="dataset", split="test"))]
fn score_counts(
    py: Python<'_>,
    n: usize,
    correct: usize,
    unparseable: usize,
    refused: usize,
    taker_model: &str,
    dataset: &str,
    split: &str,
) -> PyResult<Py<PyAny>> {
    let meta = ScoreMeta {
        taker_model: taker_model.into(),
        dataset: dataset.into(),
        split: split.into(),
    };
    let report = ScoreReport::from_counts(meta, n, correct, unparseable, refused).map_err(value_err)?;
    ser_to_py(py, &report)
}

/// `"A"`..`"D"` or `"unparseable"`.
#[pyfunction]
fn parse_answer(raw: &str) -> String {
    dcq_core::parse_answer(raw).to_string()
}

#[pyfunction]
#[pyo3(signature = (raw, expected_count=3))]
fn parse_variants(raw: &str, expected_count: usize) -> PyResult<Vec<String>> {
    quizgen::parse_variants(raw, expected_count).map_err(value_err)
}

#[pyfunction]
fn join_options(bodies: Vec<String>) -> PyResult<String> {
    if bodies.is_empty() || bodies.len() > 4 {
        return Err(value_err("need 1 to 4 options"));
    }
    Ok(quizgen::join_options(&bodies, &Slot::ALL[..bodies.len()]))
}

#[pyfunction]
fn build_generation_prompt(original: &str) -> String {
    quizgen::build_generation_prompt(&instance(original, "", ""))
}

#[pyfunction]
fn build_quiz_prompt(options: [String; 4], dataset: &str, split: &str) -> String {
    let item = QuizItem {
        instance_id: InstanceId("0".into()),
        dataset: dataset.into(),
        split: split.into(),
        quiz_kind: QuizKind::Modified,
        options: QuizOptions::from_array(options),
        correct_slot: None,
        generator_model: String::new(),
    };
    dcq_core::build_quiz_prompt(&item, dataset, split)
}

/// `(accepted, reasons)` for a candidate perturbation set.
#[pyfunction]
fn validate_variants(original: &str, variants: Vec<String>) -> (bool, Vec<String>) {
    let verdict = quizgen::validate_variants(&instance(original, "", ""), &variants);
    (
        verdict.accepted,
        verdict.reasons.iter().map(|r| r.to_string()).collect(),
    )
}

/// Quiz item dict. Standard quizzes take three variants, modified ones four.
#[pyfunction]
#[pyo3(signature = (original, variants, slot="D", kind="standard", dataset="dataset", split="test"))]
fn assemble_quiz(
    py: Python<'_>,
    original: &str,
    variants: Vec<String>,
    slot: &str,
    kind: &str,
    dataset: &str,
    split: &str,
) -> PyResult<Py<PyAny>> {
    let inst = instance(original, dataset, split);
    let set = PerturbationSet {
        instance_id: inst.instance_id.clone(),
        variants,
        generator_model: String::new(),
        generation_seedless: true,
    };
    let policy = PlacementPolicy {
        fixed_slot: parse_slot(slot)?,
    };
    let item = quizgen::assemble_quiz(&inst, &set, policy, parse_kind(kind)?).map_err(value_err)?;
    ser_to_py(py, &item)
}

/// Bias profile dict from modified-quiz counts `[A, B, C, D]`.
#[pyfunction]
#[pyo3(signature = (counts, unparseable=0, taker_model="taker"))]
fn bias_profile(py: Python<'_>, counts: [u64; 4], unparseable: u64, taker_model: &str) -> PyResult<Py<PyAny>> {
    let profile = BiasProfile::from_counts(taker_model, SlotCounts::new(counts), unparseable).map_err(value_err)?;
    ser_to_py(py, &profile)
}

#[pyfunction]
fn expected_kappa(m: f64, bias_at_correct: f64) -> f64 {
    simlab::expected_kappa(m, bias_at_correct)
}

/// Monte Carlo sweep; each bias is `[A, B, C, D]`. Returns one dict per cell.
#[pyfunction]
#[pyo3(signature = (m_values, biases, n=100, trials=1000, seed=7, correct_slot="D"))]
fn simulate(
    py: Python<'_>,
    m_values: Vec<f64>,
    biases: Vec<[f64; 4]>,
    n: usize,
    trials: usize,
    seed: u64,
    correct_slot: &str,
) -> PyResult<Py<PyAny>> {
    let config = SweepConfig {
        m_values,
        bias_values: biases.into_iter().map(probs).collect(),
        n,
        trials,
        seed,
        correct_slot: parse_slot(correct_slot)?,
    };
    let rows = py.detach(|| simlab::estimator_sweep(&config)).map_err(value_err)?;
    ser_to_py(py, &rows)
}

/// Runs every stage for a run config file and returns the score reports.
#[pyfunction]
#[pyo3(signature = (config_path, timestamp=None))]
fn pipeline(py: Python<'_>, config_path: PathBuf, timestamp: Option<String>) -> PyResult<Py<PyAny>> {
    let config = RunConfig::load(&config_path).map_err(|e| PipelineFailure::new_err((e.to_string(), e.exit_code())))?;
    let timestamp = timestamp.unwrap_or_else(current_timestamp);
    let summary = py
        .detach(|| run_pipeline(&config, &timestamp))
        .map_err(|e| PipelineFailure::new_err((e.to_string(), e.exit_code())))?;
    ser_to_py(py, &summary.reports)
}

/// Writes an offline fixture (toy partition, scripted endpoints, run config)
/// into `dir` and returns the run config path. `answer` is `"correct"` or a
/// fixed response such as `"A"`.
#[pyfunction]
#[pyo3(signature = (dir, rows=40, sample_n=10, seed=1, answer="correct", placement="default"))]
fn write_mock_fixture(
    dir: PathBuf,
    rows: usize,
    sample_n: usize,
    seed: u64,
    answer: &str,
    placement: &str,
) -> PyResult<PathBuf> {
    let placement = match placement {
        "default" => PlacementSource::Default,
        "calibrate" => PlacementSource::Calibrate,
        other => return Err(value_err(format!("unknown placement {other:?}"))),
    };
    let fixture = mock::write_fixture(&dir, rows, sample_n, seed, placement, |quiz| {
        match (answer, quiz.correct_slot) {
            ("correct", Some(slot)) => format!("{slot})"),
            ("correct", None) => "A".into(),
            (fixed, _) => fixed.to_string(),
        }
    })
    .map_err(value_err)?;
    Ok(fixture.run_config)
}

/// Score grid of a report file as `"table"` or `"csv"` text.
#[pyfunction]
#[pyo3(signature = (report_path, format="table"))]
fn render_report(report_path: PathBuf, format: &str) -> PyResult<String> {
    let format: GridFormat = format.parse().map_err(value_err)?;
    let file = ReportFile::read(&report_path).map_err(value_err)?;
    Ok(render_grid(&file.reports, format))
}

#[pymodule]
fn dcq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PipelineFailure", m.py().get_type::<PipelineFailure>())?;
    m.add("P_E_CAP", scoring::P_E_CAP)?;
    m.add_function(wrap_pyfunction!(kappa_fixed, m)?)?;
    m.add_function(wrap_pyfunction!(general_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(expected_agreement, m)?)?;
    m.add_function(wrap_pyfunction!(format_pct, m)?)?;
    m.add_function(wrap_pyfunction!(score_counts, m)?)?;
    m.add_function(wrap_pyfunction!(parse_answer, m)?)?;
    m.add_function(wrap_pyfunction!(parse_variants, m)?)?;
    m.add_function(wrap_pyfunction!(join_options, m)?)?;
    m.add_function(wrap_pyfunction!(build_generation_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(build_quiz_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(validate_variants, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_quiz, m)?)?;
    m.add_function(wrap_pyfunction!(bias_profile, m)?)?;
    m.add_function(wrap_pyfunction!(expected_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(write_mock_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    Ok(())
}
