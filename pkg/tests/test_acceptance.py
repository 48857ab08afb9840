"""
Desk-scale end-to-end run on the shipped 5,000-sentence corpus with configs/desk.cfg.
Takes hours on one core; run with ``pytest -m slow``. Set CAPFIX_CAPTIONS to use
another clean caption file instead.
"""
import os
import re

import pytest

from capfix.cli import cli
from tests.conftest import DESK_CAPTIONS, REPO_ROOT, last_json

pytestmark = pytest.mark.slow


@pytest.fixture
def desk_config(tmp_path):
    with open(os.path.join(REPO_ROOT, "configs", "desk.cfg"), encoding="utf-8") as handle:
        text = handle.read()
    captions = os.environ.get("CAPFIX_CAPTIONS", DESK_CAPTIONS)
    text = re.sub(r"(?m)^captions = .*$", f"captions = {captions}", text)
    text = re.sub(r"(?m)^output_dir = .*$", "output_dir = run", text)
    path = tmp_path / "desk.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_desk_run_meets_accuracy_and_fidelity_targets(runner, desk_config, tmp_path):
    run = tmp_path / "run"
    result = runner.invoke(cli, ["generate", "--config", desk_config, "--threads", "4"])
    assert result.exit_code == 0, result.output
    counts = last_json(result.output)["counts"]
    assert counts["sentences"] >= 5000
    assert counts["train"] + counts["validation"] + counts["test"] == 6 * counts["sentences"]

    result = runner.invoke(cli, ["train", "--config", desk_config])
    assert result.exit_code == 0, result.output

    corrected = tmp_path / "corrected.jsonl"
    result = runner.invoke(cli, [
        "correct", str(run / "model.ckpt"), str(run / "test_inputs.jsonl"), str(corrected), "--threads", "4",
    ])
    assert result.exit_code == 0, result.output

    result = runner.invoke(cli, [
        "evaluate", str(corrected), str(run / "test_references.jsonl"), "--labels", str(run / "test.jsonl"),
    ])
    assert result.exit_code == 0, result.output
    report = last_json(result.output)
    assert report["token_accuracy"] >= 0.99
    assert report["macro_f1"] >= 0.98
    assert report["exact_match_rate"] >= 0.99
    assert report["clean_altered_rate"] <= 0.01
