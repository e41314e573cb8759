from __future__ import annotations

import json
from pathlib import Path

import pytest

from lrmomentum import cli
from lrmomentum.config import ExperimentConfig
from lrmomentum.exceptions import NumericError
from lrmomentum.harness import COMPARE_FILE, METRICS_FILE
from lrmomentum.report import CheckReport
from lrmomentum.status import ExitCode
from lrmomentum.verify import CHECKS


def _write_config(tmp_path: Path, **fields: object) -> Path:
    path = tmp_path / "config.json"
    data = {"n": 8, "true_rank": 2, "init_rank": 4, "max_steps": 2}
    data.update(fields)
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_train(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _write_config(tmp_path)
    out_dir = tmp_path / "run"
    code = cli.main(
        [
            "-q",
            "train",
            "--config",
            str(config),
            "--out-dir",
            str(out_dir),
            "--optimizer",
            "lr-hb",
        ]
    )
    assert code == ExitCode.SUCCESS
    assert (out_dir / METRICS_FILE).is_file()
    assert capsys.readouterr().out.startswith("step=2 ")


def test_compare(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _write_config(tmp_path, max_steps=1)
    code = cli.main(
        [
            "-q",
            "compare",
            "--config",
            str(config),
            "--out-dir",
            str(tmp_path),
            "--optimizers",
            "hb, lr-adam",
        ]
    )
    assert code == ExitCode.SUCCESS
    assert capsys.readouterr().out.strip() == str(tmp_path / COMPARE_FILE)
    assert (tmp_path / "lr-adam" / METRICS_FILE).is_file()


def test_invalid_override(tmp_path: Path) -> None:
    code = cli.main(
        ["-q", "train", "--lr", "-1", "--out-dir", str(tmp_path / "run")]
    )
    assert code == ExitCode.CONFIG_ERROR
    assert not (tmp_path / "run").exists()


def test_missing_config_file(tmp_path: Path) -> None:
    code = cli.main(
        ["-q", "train", "--config", str(tmp_path / "missing.json")]
    )
    assert code == ExitCode.CONFIG_ERROR


def test_numeric_failure(monkeypatch: pytest.MonkeyPatch) -> None:
    def explode(cfg: ExperimentConfig) -> None:
        raise NumericError("gradient is not finite")

    monkeypatch.setattr(cli, "run_experiment", explode)
    assert cli.main(["-q", "train"]) == ExitCode.NUMERIC_FAILURE


def test_unexpected_error(monkeypatch: pytest.MonkeyPatch) -> None:
    def explode(cfg: ExperimentConfig) -> None:
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "run_experiment", explode)
    assert cli.main(["-q", "train"]) == ExitCode.FAILURE


def test_flow(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = cli.main(
        [
            "-q",
            "flow",
            "--study",
            "counterexample",
            "--out-dir",
            str(tmp_path),
        ]
    )
    assert code == ExitCode.SUCCESS
    assert capsys.readouterr().out.startswith("PASS counterexample")


def test_verify(capsys: pytest.CaptureFixture[str]) -> None:
    code = cli.main(["-q", "verify", "--check", "counterexample"])
    assert code == ExitCode.SUCCESS
    assert "PASS counterexample" in capsys.readouterr().out


def test_failed_verification(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setitem(
        CHECKS, "broken", lambda seed: [CheckReport("broken", False, "no")]
    )
    code = cli.main(["-q", "verify", "--check", "broken"])
    assert code == ExitCode.VERIFICATION_FAILURE


def test_unknown_command() -> None:
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["fly"])
    assert excinfo.value.code == 2
