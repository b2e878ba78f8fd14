use std::path::Path;
use std::process::{Command, Output};

use dcq_core::mock::{write_fixture, Fixture};
use dcq_core::pipeline::PlacementSource;
use dcq_core::report::ReportFile;

fn dcq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcq"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("DCQ_CLI_TEST_KEY")
        .output()
        .expect("dcq runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture(dir: &Path, placement: PlacementSource) -> Fixture {
    // correct on odd ids, "A" otherwise; modified answers avoid C
    write_fixture(dir, 40, 10, 3, placement, |quiz| match quiz.correct_slot {
        Some(s) if quiz.instance_id.as_str().parse::<u64>().unwrap() % 2 == 1 => s.to_string(),
        Some(_) => "A".into(),
        None => ["A", "B", "D"][quiz.instance_id.as_str().len() % 3].into(),
    })
    .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_command_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(dir.path(), PlacementSource::Default);
    let table = ok(&dcq(dir.path(), &["pipeline", "--config", s(&f.run_config)]));
    assert!(table.contains("mock-taker train Score (%)"), "{table}");
    let first = std::fs::read(f.out_dir.join("report.json")).unwrap();

    let again = dir.path().join("again");
    ok(&dcq(
        dir.path(),
        &[
            "pipeline",
            "--config",
            s(&f.run_config),
            "--out-dir",
            s(&again),
            "--concurrency",
            "1",
        ],
    ));
    assert_eq!(std::fs::read(again.join("report.json")).unwrap(), first);
    let report = ReportFile::read(&f.out_dir.join("report.json")).unwrap();
    assert_eq!(report.header.unwrap().timestamp, "2023-11-14T22:13:20Z");
}

#[test]
fn staged_commands_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(dir.path(), PlacementSource::Calibrate);
    ok(&dcq(dir.path(), &["pipeline", "--config", s(&f.run_config)]));
    let piped = ReportFile::read(&f.out_dir.join("report.json")).unwrap().reports;

    let st = dir.path().join("staged");
    let p = |name: &str| st.join(name).to_str().unwrap().to_string();
    ok(&dcq(
        dir.path(),
        &[
            "sample",
            "--config",
            s(&f.partition_config),
            "--seed",
            "3",
            "--n",
            "10",
            "--out-dir",
            s(&st),
        ],
    ));
    ok(&dcq(
        dir.path(),
        &[
            "generate",
            "--in",
            &p("sample.jsonl"),
            "--endpoint",
            s(&f.generator_endpoint),
            "--kind",
            "modified",
            "--out",
            &p("modified_quiz.jsonl"),
        ],
    ));
    ok(&dcq(
        dir.path(),
        &[
            "run",
            "--quiz",
            &p("modified_quiz.jsonl"),
            "--endpoint",
            s(&f.taker_endpoint),
            "--out",
            &p("modified_answers.jsonl"),
        ],
    ));
    ok(&dcq(
        dir.path(),
        &[
            "calibrate",
            "--answers",
            &p("modified_answers.jsonl"),
            "--out",
            &p("bias.json"),
        ],
    ));
    ok(&dcq(
        dir.path(),
        &[
            "assemble",
            "--sample",
            &p("sample.jsonl"),
            "--perturbations",
            &p("perturbations.jsonl"),
            "--placement-from",
            &p("bias.json"),
            "--out",
            &p("quiz.jsonl"),
        ],
    ));
    ok(&dcq(
        dir.path(),
        &[
            "run",
            "--quiz",
            &p("quiz.jsonl"),
            "--endpoint",
            s(&f.taker_endpoint),
            "--out",
            &p("answers.jsonl"),
        ],
    ));
    ok(&dcq(
        dir.path(),
        &["score", "--answers", &p("answers.jsonl"), "--out", &p("report.json")],
    ));
    let staged = ReportFile::read(&st.join("report.json")).unwrap().reports;
    assert_eq!(staged, piped);

    let csv = ok(&dcq(
        dir.path(),
        &["report", "--in", &p("report.json"), "--format", "csv"],
    ));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "Dataset,mock-taker train Score (%),mock-taker train Cont. (%)"
    );
    assert!(lines.next().unwrap().starts_with("AG News,"));

    // the taker never picks C on the modified quiz
    let bias: serde_json::Value = serde_json::from_slice(&std::fs::read(st.join("bias.json")).unwrap()).unwrap();
    assert_eq!(bias["least_preferred"], "C");
    assert_eq!(bias["header"]["stage"], "calibrate");
}

#[test]
fn simulate_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    ok(&dcq(
        dir.path(),
        &[
            "simulate",
            "--m",
            "0,0.5,1",
            "--bias",
            "0.03",
            "--bias",
            "0.25/0.25/0.25/0.25",
            "--n",
            "50",
            "--trials",
            "40",
            "--seed",
            "7",
            "--out",
            s(&out),
        ],
    ));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# {"));
    assert_eq!(lines[1], "m,bias_A,bias_B,bias_C,bias_D,mean_kappa,std_kappa,trials,n");
    assert_eq!(lines.len(), 2 + 6);
    let again = dir.path().join("again.csv");
    ok(&dcq(
        dir.path(),
        &[
            "simulate",
            "--m",
            "0,0.5,1",
            "--bias",
            "0.03",
            "--bias",
            "0.25/0.25/0.25/0.25",
            "--n",
            "50",
            "--trials",
            "40",
            "--seed",
            "7",
            "--out",
            s(&again),
        ],
    ));
    assert_eq!(std::fs::read_to_string(&again).unwrap(), text);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(dir.path(), PlacementSource::Default);

    // config error: no seed for sampling
    let out = dcq(dir.path(), &["sample", "--config", s(&f.partition_config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage sample"));

    // config error: missing API key for a live endpoint
    let live = dir.path().join("live.toml");
    std::fs::write(
        &live,
        "kind = \"http\"\nendpoint_url = \"http://127.0.0.1:9/v1\"\nmodel_id = \"m\"\napi_key_ref = \"DCQ_CLI_TEST_KEY\"\nmax_retries = 0\ntimeout_secs = 2\n",
    )
    .unwrap();
    ok(&dcq(
        dir.path(),
        &["sample", "--config", s(&f.partition_config), "--seed", "3", "--n", "10"],
    ));
    let out = dcq(
        dir.path(),
        &["generate", "--in", "sample.jsonl", "--endpoint", s(&live)],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("DCQ_CLI_TEST_KEY"));

    // transport error: key present, nothing listening
    let out = Command::new(env!("CARGO_BIN_EXE_dcq"))
        .args(["generate", "--in", "sample.jsonl", "--endpoint", s(&live)])
        .current_dir(dir.path())
        .env("DCQ_CLI_TEST_KEY", "k")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // validation exhausted: the generator returns garbage
    let junk = dir.path().join("junk.json");
    std::fs::write(
        &junk,
        r#"{"default": {"reply": {"text": "no options here"}}, "responses": [{"prompt": "x", "text": "y"}]}"#,
    )
    .unwrap();
    let junk_endpoint = dir.path().join("junk.toml");
    std::fs::write(
        &junk_endpoint,
        "kind = \"scripted\"\nmodel_id = \"junk\"\nscript = \"junk.json\"\n",
    )
    .unwrap();
    let out = dcq(
        dir.path(),
        &[
            "generate",
            "--in",
            "sample.jsonl",
            "--endpoint",
            s(&junk_endpoint),
            "--max-attempts",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("perturbations.failures.jsonl").exists());

    // bad flag value is a usage error from clap
    let out = dcq(dir.path(), &["report", "--in", "x.json", "--format", "xml"]);
    assert_eq!(out.status.code(), Some(2));
}
