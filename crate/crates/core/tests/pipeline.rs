use std::path::Path;

use dcq_core::artifact::{read_jsonl, write_json};
use dcq_core::gateway::{EndpointConfig, GatewayError, ModelEndpoint, ScriptDefault, ScriptFile, ScriptedReply};
use dcq_core::mock::{write_fixture, Fixture};
use dcq_core::pipeline::{
    partition_dir_name, run_pipeline, BiasFile, PipelineError, PlacementSource, RunConfig, EXIT_CONFIG, EXIT_EXHAUSTED,
};
use dcq_core::proctor::{AnswerRecord, ParsedAnswer};
use dcq_core::report::ReportFile;
use dcq_core::scoring::format_pct;
use dcq_core::{QuizItem, Slot};

const TS: &str = "2024-01-01T00:00:00Z";

fn fixture(dir: &Path, placement: PlacementSource, answer: impl FnMut(&QuizItem) -> String) -> (Fixture, RunConfig) {
    let f = write_fixture(dir, 40, 10, 5, placement, answer).unwrap();
    let config = RunConfig::load(&f.run_config).unwrap();
    (f, config)
}

fn partition_dir(config: &RunConfig) -> std::path::PathBuf {
    config.out_dir.join(partition_dir_name(&config.datasets[0].dataset))
}

#[test]
fn all_d_taker_scores_full_contamination() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = fixture(dir.path(), PlacementSource::Default, |_| "D)".into());
    let summary = run_pipeline(&config, TS).unwrap();
    let r = &summary.reports[0];
    assert_eq!(
        (
            format_pct(r.score_pct).as_str(),
            format_pct(r.contamination_pct).as_str()
        ),
        ("100.00", "100.00")
    );
    assert!(r.contaminated);
    // three-variant generation only: one generator call per instance
    assert_eq!(summary.generator_requests, 10);
    assert_eq!(summary.taker_requests, 10);
    let text = std::fs::read_to_string(config.out_dir.join("report.txt")).unwrap();
    assert!(text.contains("AG News"), "{text}");
}

#[test]
fn calibration_moves_the_original_to_the_least_chosen_slot() {
    let dir = tempfile::tempdir().unwrap();
    // the taker never picks A on the modified quiz and always finds the original
    let mut i = 0;
    let (_, config) = fixture(dir.path(), PlacementSource::Calibrate, move |quiz| {
        match quiz.correct_slot {
            Some(s) => s.to_string(),
            None => {
                i += 1;
                ["B", "C", "D"][i % 3].to_string()
            }
        }
    });
    let summary = run_pipeline(&config, TS).unwrap();
    let pdir = partition_dir(&config);
    let bias = BiasFile::read(&pdir.join("bias.json")).unwrap();
    assert_eq!(bias.profile.least_preferred, Slot::A);
    assert_eq!(bias.profile.counts.a, 0);
    assert!(config.out_dir.join("bias_pooled.json").exists());
    let (_, quiz): (_, Vec<QuizItem>) = read_jsonl(&pdir.join("quiz.jsonl")).unwrap();
    assert!(quiz.iter().all(|q| q.correct_slot == Some(Slot::A)));
    let (_, modified): (_, Vec<QuizItem>) = read_jsonl(&pdir.join("modified_quiz.jsonl")).unwrap();
    assert!(modified.iter().all(|q| q.correct_slot.is_none()));
    assert_eq!(format_pct(summary.reports[0].score_pct), "100.00");
    // two generator calls per instance (three variants, then the fourth)
    assert_eq!(summary.generator_requests, 20);
    assert_eq!(summary.taker_requests, 20);
}

#[test]
fn existing_outputs_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    let (f, config) = fixture(dir.path(), PlacementSource::Default, |_| "A".into());
    run_pipeline(&config, TS).unwrap();
    let report = std::fs::read(config.out_dir.join("report.json")).unwrap();
    // without scripts every stage must come from disk
    std::fs::remove_file(dir.path().join("generator_script.json")).unwrap();
    std::fs::remove_file(dir.path().join("taker_script.json")).unwrap();
    let mut config = config;
    config.generator = EndpointConfig::Http(ModelEndpoint {
        endpoint_url: "http://127.0.0.1:9".into(),
        model_id: "unused".into(),
        api_key_ref: "DCQ_TEST_UNSET_KEY".into(),
        timeout_secs: 1,
        max_retries: 0,
        max_in_flight: 1,
    });
    config.taker = config.generator.clone();
    let summary = run_pipeline(&config, TS).unwrap();
    assert_eq!(summary.generator_requests + summary.taker_requests, 0);
    assert_eq!(std::fs::read(config.out_dir.join("report.json")).unwrap(), report);
    assert!(f.out_dir.exists());
}

#[test]
fn exhausted_generation_exits_four_and_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = fixture(dir.path(), PlacementSource::Default, |_| "D".into());
    // every generation reply is malformed
    let script = ScriptFile {
        default: ScriptDefault::Reply(ScriptedReply::text("I cannot do that.")),
        responses: vec![dcq_core::gateway::ScriptEntry {
            fingerprint: Some("0".repeat(64)),
            prompt: None,
            reply: ScriptedReply::text("A) x"),
        }],
    };
    write_json(&dir.path().join("generator_script.json"), &script).unwrap();
    let err = run_pipeline(&config, TS).unwrap_err();
    assert_eq!(err.stage, "generate");
    assert_eq!(err.exit_code(), EXIT_EXHAUSTED);
    assert!(matches!(
        err.error,
        PipelineError::GenerationFailures {
            failed: 10,
            total: 10,
            ..
        }
    ));
    let pdir = partition_dir(&config);
    assert!(pdir.join("sample.jsonl").exists());
    assert!(pdir.join("perturbations.failures.jsonl").exists());
    assert!(!pdir.join("perturbations.jsonl").exists());
    assert!(err.to_string().contains("stage generate"));
}

#[test]
fn missing_api_key_names_the_variable() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut config) = fixture(dir.path(), PlacementSource::Default, |_| "D".into());
    config.generator = EndpointConfig::Http(ModelEndpoint {
        endpoint_url: "https://api.example.invalid/v1".into(),
        model_id: "gen".into(),
        api_key_ref: "DCQ_TEST_MISSING_KEY_VAR".into(),
        timeout_secs: 5,
        max_retries: 0,
        max_in_flight: 1,
    });
    let err = run_pipeline(&config, TS).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
    match &err.error {
        PipelineError::Gateway(GatewayError::Auth(msg)) => assert!(msg.contains("DCQ_TEST_MISSING_KEY_VAR")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unscripted_quiz_prompts_become_unparseable_records() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = fixture(dir.path(), PlacementSource::Default, |_| "D".into());
    let script = ScriptFile {
        default: ScriptDefault::Error,
        responses: vec![dcq_core::gateway::ScriptEntry {
            fingerprint: None,
            prompt: Some("unrelated".into()),
            reply: ScriptedReply::filtered(),
        }],
    };
    write_json(&dir.path().join("taker_script.json"), &script).unwrap();
    let summary = run_pipeline(&config, TS).unwrap();
    let (_, answers): (_, Vec<AnswerRecord>) = read_jsonl(&partition_dir(&config).join("answers.jsonl")).unwrap();
    assert_eq!(answers.len(), 10);
    assert!(answers
        .iter()
        .all(|a| a.parsed == ParsedAnswer::Unparseable && a.error.is_some()));
    let r = &summary.reports[0];
    assert_eq!((r.unparseable, r.correct), (10, 0));
    assert_eq!(format_pct(r.contamination_pct), "0.00");
    let file = ReportFile::read(&config.out_dir.join("report.json")).unwrap();
    assert_eq!(file.header.unwrap().stage, "score");
}

#[test]
fn config_rejects_missing_source() {
    let dir = tempfile::tempdir().unwrap();
    let (f, _) = fixture(dir.path(), PlacementSource::Default, |_| "D".into());
    std::fs::remove_file(&f.data).unwrap();
    let err = RunConfig::load(&f.run_config).unwrap_err();
    assert!(err.to_string().contains("does not exist"), "{err}");
    assert_eq!(err.exit_code(), EXIT_CONFIG);
}

#[test]
fn sample_header_records_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = fixture(dir.path(), PlacementSource::Default, |_| "D".into());
    run_pipeline(&config, TS).unwrap();
    let (header, rows): (_, Vec<dcq_core::DatasetInstance>) =
        read_jsonl(&partition_dir(&config).join("sample.jsonl")).unwrap();
    let header = header.unwrap();
    assert_eq!(header.seed, Some(5));
    assert_eq!(header.stage, "sample");
    assert_eq!(header.timestamp, TS);
    assert_eq!(rows.len(), 10);
}
