from __future__ import annotations

import logging
from pathlib import Path

import pytest

from vms_accel.dataflow import PipelineSpec
from vms_accel.errors import FileFormatError, InputValidationError
from vms_accel.kernel import BlockConfig
from vms_accel.perfmodel import KernelConfig
from vms_accel.settings import CONFIG_ENV, DEFAULTS, find_config_file, load_run_config, merge
from vms_accel.tuner import SearchBounds


@pytest.fixture()
def dirs(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> tuple[Path, Path]:
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    project, home = tmp_path / "project", tmp_path / "home"
    project.mkdir()
    home.mkdir()
    return project, home


def _write(root: Path, text: str) -> Path:
    path = root / ".vms_accel" / "config.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_without_any_file(dirs) -> None:
    project, home = dirs
    cfg = load_run_config(cwd=project, home=home)
    assert cfg.source is None
    assert cfg.seed == 1 and cfg.threads == 1
    assert cfg.dims == (16, 32, 1024, 64)
    assert cfg.density == 1 / 16
    assert cfg.n_molecules == 1000
    assert cfg.budget == 1e-2
    assert cfg.widths == (16, 8)
    assert cfg.block == BlockConfig(16, 16, 4, 8)
    assert cfg.pipeline == PipelineSpec.default()
    assert cfg.kernel == KernelConfig(block=BlockConfig(16, 16, 4, 8))
    assert cfg.device == "paper-fpga"
    assert cfg.search == SearchBounds()


def test_home_config_is_used(dirs) -> None:
    project, home = dirs
    path = _write(home, "seed: 5\n")
    cfg = load_run_config(cwd=project, home=home)
    assert cfg.seed == 5
    assert cfg.source == path


def test_project_config_beats_home(dirs) -> None:
    project, home = dirs
    _write(home, "seed: 5\n")
    _write(project, "seed: 6\n")
    assert load_run_config(cwd=project, home=home).seed == 6


def test_env_beats_project_and_explicit_beats_env(dirs, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    project, home = dirs
    _write(project, "seed: 6\n")
    env_cfg = tmp_path / "env.yaml"
    env_cfg.write_text("seed: 7\n", encoding="utf-8")
    explicit = tmp_path / "explicit.yaml"
    explicit.write_text("seed: 8\n", encoding="utf-8")
    monkeypatch.setenv(CONFIG_ENV, str(env_cfg))
    assert load_run_config(cwd=project, home=home).seed == 7
    assert load_run_config(explicit, cwd=project, home=home).seed == 8


def test_missing_explicit_config(dirs, tmp_path: Path) -> None:
    project, home = dirs
    with pytest.raises(InputValidationError):
        find_config_file(tmp_path / "nope.yaml", cwd=project, home=home)


def test_nested_keys_merge(dirs) -> None:
    project, home = dirs
    _write(project, "dims:\n  samples: 4\nblock:\n  latent: 2\nsearch:\n  overlap: false\n")
    cfg = load_run_config(cwd=project, home=home)
    assert cfg.dims == (4, 32, 1024, 64)
    assert cfg.block == BlockConfig(16, 16, 4, 2)
    assert cfg.kernel.block == cfg.block
    assert cfg.search.overlap is False
    assert cfg.search.max_unroll == 64
    assert cfg.search.max_compounds is None


def test_search_bounds_cap_compounds(dirs) -> None:
    project, home = dirs
    _write(project, "search:\n  max_compounds: 8\n  max_instances: 2\n")
    cfg = load_run_config(cwd=project, home=home)
    assert cfg.search == SearchBounds(max_unroll=64, max_instances=2, max_compounds=8, overlap=True)


def test_unknown_keys_warn(dirs, caplog: pytest.LogCaptureFixture) -> None:
    project, home = dirs
    _write(project, "seed: 3\ncolour: blue\n")
    with caplog.at_level(logging.WARNING, logger="vms_accel.settings"):
        cfg = load_run_config(cwd=project, home=home)
    assert cfg.seed == 3
    assert any("colour" in rec.getMessage() for rec in caplog.records)


@pytest.mark.parametrize(
    "text",
    [
        "threads: 0\n",
        "block:\n  molecules: 0\n",
        "pipeline:\n  stages:\n    - {name: FETCH}\n  fifo_depths: []\n",
        "kernel:\n  unroll_latent: -1\n",
        "search:\n  max_compounds: 0\n",
        "dims: 12\n",
        "seed: [1, 2\n",
        "- just\n- a list\n",
    ],
)
def test_invalid_configs_name_the_file(dirs, text: str) -> None:
    project, home = dirs
    path = _write(project, text)
    with pytest.raises(FileFormatError) as info:
        load_run_config(cwd=project, home=home)
    assert str(path) in str(info.value)


def test_merge_is_key_by_key() -> None:
    merged = merge({"a": {"x": 1, "y": 2}, "b": [1]}, {"a": {"y": 3}, "b": [2, 3]})
    assert merged == {"a": {"x": 1, "y": 3}, "b": [2, 3]}
    assert DEFAULTS["dims"]["samples"] == 16
