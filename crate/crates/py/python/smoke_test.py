"""Smoke test for the dcq extension module.

Build and run:
    cd crates/py && maturin develop && python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import dcq


def close(a, b, tol=1e-12):
    return math.isclose(a, b, abs_tol=tol)


def check_estimator():
    assert close(dcq.kappa_fixed(0.25), 0.0)
    assert close(dcq.kappa_fixed(1.0), 1.0)
    assert close(dcq.general_kappa(0.7, 0.25), dcq.kappa_fixed(0.7))
    assert dcq.format_pct(100 * dcq.kappa_fixed(0.72)) == "62.67"
    assert close(dcq.expected_agreement([0.63, 0.30, 0.04, 0.03], [0, 0, 0, 1]), 0.03)
    report = dcq.score_counts(10, 7)
    assert dcq.format_pct(report["contamination_pct"]) == "60.00"
    assert report["contaminated"] is True
    try:
        dcq.kappa_fixed(1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("p_o outside [0, 1] must raise")


def check_parsing():
    assert dcq.parse_answer("D)") == "D"
    assert dcq.parse_answer("Option b") == "B"
    assert dcq.parse_answer("A or B") == "unparseable"
    bodies = ["first option", "second\nline two", "third"]
    assert dcq.parse_variants(dcq.join_options(bodies), 3) == bodies


def check_quiz():
    original = "Article: Oil prices rose.\nLabel: 2 (Business)"
    variants = [
        "Article: Oil prices climbed.\nLabel: 2 (Business)",
        "Article: Oil prices jumped.\nLabel: 2 (Business)",
        "Article: Oil prices advanced.\nLabel: 2 (Business)",
    ]
    ok, reasons = dcq.validate_variants(original, variants)
    assert ok, reasons
    ok, _ = dcq.validate_variants(original, [original] + variants[:2])
    assert not ok
    item = dcq.assemble_quiz(original, variants, slot="B")
    assert item["correct_slot"] == "B"
    assert [s for s, t in item["options"].items() if t == original] == ["B"]
    prompt = dcq.build_quiz_prompt(list(item["options"].values()), "AG News", "train")
    assert prompt.endswith("Answer:")
    assert "train split of the AG News dataset" in prompt


def check_calibration_and_simulation():
    assert dcq.bias_profile([63, 30, 4, 3])["least_preferred"] == "D"
    assert dcq.bias_profile([25, 25, 25, 25])["least_preferred"] == "D"
    assert dcq.bias_profile([10, 10, 40, 40])["least_preferred"] == "B"
    rows = dcq.simulate([0.0, 0.5, 1.0], [[0.25] * 4], n=100, trials=300, seed=7)
    for row in rows:
        assert abs(row["mean_kappa"] - row["m"]) < 0.03, row
    assert rows == dcq.simulate([0.0, 0.5, 1.0], [[0.25] * 4], n=100, trials=300, seed=7)


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        config = dcq.write_mock_fixture(tmp, answer="correct")
        reports = dcq.pipeline(config, timestamp="2024-01-01T00:00:00Z")
        assert len(reports) == 1
        assert dcq.format_pct(reports[0]["score_pct"]) == "100.00"
        grid = dcq.render_report(Path(tmp) / "out" / "report.json", "csv")
        assert grid.splitlines()[1] == "AG News,100.00,100.00", grid
        try:
            dcq.pipeline(Path(tmp) / "missing.toml")
        except dcq.PipelineFailure as e:
            assert e.args[1] == 2
        else:
            raise AssertionError("missing config must fail")


if __name__ == "__main__":
    for check in (check_estimator, check_parsing, check_quiz, check_calibration_and_simulation, check_pipeline):
        check()
        print(f"ok  {check.__name__}")
    print("smoke test passed")
