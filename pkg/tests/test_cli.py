from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from vms_accel import cli
from vms_accel.errors import EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK, EXIT_USAGE
from vms_accel.formats import read_fingerprints, read_model, read_plan, read_predictions
from vms_accel.perfmodel import pct_peak
from vms_accel.quantize import QuantizedModel, evaluate_plan
from vms_accel.settings import CONFIG_ENV

SMALL_CONFIG = """\
seed: 3
dims: {samples: 4, latent: 8, features: 64, proteins: 6}
density: 0.125
n_molecules: 20
block: {molecules: 4, proteins: 4, samples: 2, latent: 4}
search: {max_unroll: 8}
"""


@pytest.fixture()
def workspace(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    monkeypatch.setenv("HOME", str(tmp_path / "home"))
    monkeypatch.chdir(tmp_path)
    config = tmp_path / ".vms_accel" / "config.yaml"
    config.parent.mkdir()
    config.write_text(SMALL_CONFIG, encoding="utf-8")
    return tmp_path


def _run(*argv: str) -> int:
    return cli._cli(list(argv))


def _gen(ws: Path) -> None:
    assert _run("gen", "--out-model", str(ws / "model.bin"), "--out-fingerprints", str(ws / "fps.tsv")) == EXIT_OK


def _calibrate(ws: Path) -> None:
    _gen(ws)
    code = _run(
        "calibrate", "--model", "model.bin", "--calib", "fps.tsv",
        "--out-plan", "plan.yaml", "--out-model", "q.bin",
    )
    assert code == EXIT_OK


def test_gen_is_deterministic(workspace: Path) -> None:
    _gen(workspace)
    first = (workspace / "model.bin").read_bytes(), (workspace / "fps.tsv").read_bytes()
    _gen(workspace)
    assert ((workspace / "model.bin").read_bytes(), (workspace / "fps.tsv").read_bytes()) == first
    model = read_model(workspace / "model.bin")
    assert model.dims == (4, 8, 64, 6)
    fps = read_fingerprints(workspace / "fps.tsv", 64)
    assert len(fps) == 20 and all(fp.nnz == 8 for fp in fps)


def test_gen_full_density(workspace: Path) -> None:
    assert _run("gen", "--out-model", "m.bin", "--out-fingerprints", "f.tsv", "--density", "1", "--molecules", "3") == 0
    assert all(fp.nnz == 64 for fp in read_fingerprints(workspace / "f.tsv"))


def test_calibrate_writes_reproducible_plan(workspace: Path) -> None:
    _calibrate(workspace)
    plan_text = (workspace / "plan.yaml").read_text(encoding="utf-8")
    plan = read_plan(workspace / "plan.yaml")
    assert plan.achieved_rmse <= 1e-2
    assert isinstance(read_model(workspace / "q.bin"), QuantizedModel)
    model = read_model(workspace / "model.bin")
    assert evaluate_plan(model, read_fingerprints(workspace / "fps.tsv"), plan)[0] == plan.achieved_rmse
    assert _run("calibrate", "--model", "model.bin", "--calib", "fps.tsv", "--out-plan", "plan.yaml") == EXIT_OK
    assert (workspace / "plan.yaml").read_text(encoding="utf-8") == plan_text


def test_engines_write_identical_predictions(workspace: Path) -> None:
    _calibrate(workspace)
    outputs = {}
    for engine in cli.ENGINES:
        out = workspace / f"{engine}.csv"
        assert _run("--threads", "2", "predict", "--model", "q.bin", "--fingerprints", "fps.tsv",
                    "--out", str(out), "--engine", engine) == EXIT_OK
        outputs[engine] = out.read_bytes()
    assert outputs["reference"] == outputs["blocked"] == outputs["dataflow"]
    sim = yaml.safe_load((workspace / "dataflow.csv.sim.yaml").read_text(encoding="utf-8"))
    assert sim["n_items"] == 20
    assert len(read_predictions(workspace / "blocked.csv")) == 20 * 6


def test_predict_protein_subset_and_empty_input(workspace: Path) -> None:
    _gen(workspace)
    (workspace / "empty.tsv").write_text("# nothing\n", encoding="utf-8")
    assert _run("predict", "--model", "model.bin", "--fingerprints", "empty.tsv", "--out", "e.csv") == EXIT_OK
    assert (workspace / "e.csv").read_text(encoding="utf-8") == "molecule_id,protein_idx,mean,std\n"
    assert _run("predict", "--model", "model.bin", "--fingerprints", "fps.tsv", "--proteins", "5,1", "--out", "s.csv") == 0
    assert [p.protein_idx for p in read_predictions(workspace / "s.csv")[:2]] == [5, 1]


def test_predict_errors(workspace: Path) -> None:
    _gen(workspace)
    base = ("predict", "--model", "model.bin", "--fingerprints", "fps.tsv", "--out", "x.csv")
    assert _run(*base, "--engine", "warp") == EXIT_USAGE
    assert _run(*base, "--engine", "blocked") == EXIT_INPUT
    assert _run(*base, "--proteins", "6") == EXIT_INPUT
    assert _run("predict", "--model", "missing.bin", "--fingerprints", "fps.tsv", "--out", "x.csv") == EXIT_INPUT
    (workspace / "bad.tsv").write_text("m1\t3,1\n", encoding="utf-8")
    assert _run("predict", "--model", "model.bin", "--fingerprints", "bad.tsv", "--out", "x.csv") == EXIT_INPUT


def test_calibrate_errors(workspace: Path) -> None:
    _gen(workspace)
    base = ("calibrate", "--model", "model.bin", "--calib", "fps.tsv", "--out-plan", "p.yaml")
    assert _run(*base, "--budget", "0") == EXIT_INPUT
    assert _run(*base, "--budget", "1e-12", "--widths", "8") == EXIT_INFEASIBLE
    assert _run(*base, "--widths", "8,16") == EXIT_INPUT


def test_tune_report_is_consistent(workspace: Path) -> None:
    _calibrate(workspace)
    assert _run("tune", "--plan", "plan.yaml", "--out", "tune.yaml") == EXIT_OK
    doc = yaml.safe_load((workspace / "tune.yaml").read_text(encoding="utf-8"))
    est = doc["chosen"]["estimate"]
    assert doc["device"] == "paper-fpga"
    assert doc["workload"]["molecules"] == 20
    assert est["pct_peak"] == pytest.approx(pct_peak(est["achieved_gflops"], doc["peak_gflops"]))
    assert est["feasible"] is True
    assert "estimate" in doc["configured"]
    block = {"molecules": 4, "proteins": 4, "samples": 2, "latent": 4}
    assert doc["chosen"]["config"]["block"] == block
    assert doc["configured"]["config"]["block"] == block
    assert doc["search"]["max_compounds"] is None


def test_tune_infeasible_device(workspace: Path) -> None:
    device = workspace / "tiny.yaml"
    device.write_text(
        "name: tiny\nmac_units: 1\nclock_ghz: 1.0\ndsp_total: 1\nonchip_bits: 1000\n"
        "dram_bandwidth_gbs: 1.0\npower_watts: 1.0\ninvocation_overhead_s: 1.0e-6\n",
        encoding="utf-8",
    )
    assert _run("tune", "--device", str(device)) == EXIT_INFEASIBLE


def test_report_table_and_ledger(workspace: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = _run(
        "report", "--device", "paper-cpu", "--device", "paper-gpu", "--device", "paper-fpga",
        "--table-csv", "table.csv", "--ledger-csv", "ledger.csv",
    )
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "% of Peak Performance" in out
    table = (workspace / "table.csv").read_text(encoding="utf-8").splitlines()
    assert [row.split(",")[4] for row in table[1:]] == ["13", "17", "38"]
    ledger = [line for line in (workspace / "ledger.csv").read_text(encoding="utf-8").splitlines() if not line.startswith("#")]
    assert len(ledger) == 1 + 6


def test_report_errors(workspace: Path) -> None:
    assert _run("report") == EXIT_USAGE
    assert _run("report", "--device", "paper-fpga", "--achieved", "paper-fpga=fast") == EXIT_USAGE
    assert _run("report", "--device", "paper-fpga", "--achieved", "other=1") == EXIT_USAGE
    assert _run("report", "--device", "paper-cpu", "--ledger-csv", "l.csv") == EXIT_USAGE
    assert _run("report", "--device", "nonexistent") == EXIT_INPUT


def test_sim_command(workspace: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert _run("sim", "--items", "5", "--out", "sim.yaml") == EXIT_OK
    doc = yaml.safe_load((workspace / "sim.yaml").read_text(encoding="utf-8"))
    assert doc["n_items"] == 5
    # 24 cycles to fill, then one item per cycle
    assert doc["total_cycles"] == 28
    assert "5 items" in capsys.readouterr().out


def test_usage_errors(workspace: Path) -> None:
    assert _run() == EXIT_USAGE
    assert _run("frobnicate") == EXIT_USAGE
    assert _run("--log-level", "CHATTY", "sim") == EXIT_USAGE
    assert _run("--config", "missing.yaml", "sim") == EXIT_INPUT
