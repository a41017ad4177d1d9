from __future__ import annotations

import argparse
import json
from pathlib import Path

import pytest

from sam_peft import cli
from sam_peft.cli import main
from sam_peft.errors import NumericalError, ShapeError


def test_gen_data_writes_a_dataset(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    out = tmp_path / "d"
    code = main(["gen-data", "--out", str(out), "--size", "48", "--max-r", "6", "--resource-efficient"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert {k: len(v) for k, v in manifest["splits"].items()} == {"train": 1, "val": 1, "test": 1}
    assert "wrote instance dataset" in capsys.readouterr().out


def test_count_params_prints_the_table(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["count-params", "--preset", "vit-b-shape", "--method", "ssf"]) == 0
    out = capsys.readouterr().out
    assert "preset vit-b-shape, method ssf" in out
    assert "encoder delta:   202,752" in out


def test_dropout_none_is_accepted(capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["count-params", "--preset", "vit-b-shape", "--method", "fact", "--dropout", "none"])
    assert code == 0
    assert "dropout=0.0" in capsys.readouterr().out


def test_bad_configuration_exits_with_2(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["count-params", "--method", "lroa"]) == 2
    assert "did you mean 'lora'" in capsys.readouterr().err


def test_missing_data_exits_with_3(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["train", "--data", str(tmp_path / "none"), "--method", "lora", "--out", str(tmp_path / "c.ckpt")])
    assert code == 3
    assert "no manifest.json" in capsys.readouterr().err


def test_missing_checkpoint_exits_with_3(tmp_path: Path) -> None:
    code = main(["eval", "--ckpt", str(tmp_path / "x.ckpt"), "--data", str(tmp_path)])
    assert code == 3


def test_unknown_sweep_flag_exits_with_2(tmp_path: Path) -> None:
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"method": ["lora"], "rnak": [4]}), encoding="utf-8")
    assert main(["sweep", "--grid", str(grid), "--out-csv", str(tmp_path / "s.csv")]) == 2


def test_sweep_records_failed_runs(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"method": ["lora"], "rank": [4]}), encoding="utf-8")
    out_csv = tmp_path / "s.csv"
    assert main(["sweep", "--grid", str(grid), "--out-csv", str(out_csv)]) == 0
    assert "1 runs, 1 failed" in capsys.readouterr().out
    assert "no dataset" in out_csv.read_text(encoding="utf-8")
    assert (tmp_path / "runs" / "grid").is_dir()


def test_argparse_errors_exit_with_2() -> None:
    with pytest.raises(SystemExit) as info:
        main(["export", "--ckpt", "a", "--out", "b"])
    assert info.value.code == 2


def test_shape_errors_exit_with_the_config_code(
    monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]
) -> None:
    def broken(args: argparse.Namespace) -> int:
        raise ShapeError("matmul", (2, 3), (4, 5))

    monkeypatch.setattr(cli, "cmd_count_params", broken)
    assert main(["count-params", "--method", "lora"]) == 2
    assert "matmul: incompatible shapes (2, 3) vs (4, 5)" in capsys.readouterr().err


def test_numerical_errors_exit_with_4(monkeypatch: pytest.MonkeyPatch) -> None:
    def diverged(args: argparse.Namespace) -> int:
        raise NumericalError("loss is nan")

    monkeypatch.setattr(cli, "cmd_count_params", diverged)
    assert main(["count-params", "--method", "lora"]) == 4
