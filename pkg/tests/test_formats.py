from __future__ import annotations

import numpy as np
import pytest

from conftest import uniform_plan
from vms_accel.errors import FileFormatError
from vms_accel.fixedpoint import FixedFormat
from vms_accel.formats import (
    PREDICTION_HEADER,
    decode_model,
    encode_model,
    format_device_table_csv,
    format_device_table_text,
    format_ledger_csv,
    format_predictions,
    parse_fingerprints,
    plan_from_dict,
    plan_to_dict,
    plan_to_yaml,
    read_fingerprints,
    read_model,
    read_plan,
    read_predictions,
    write_fingerprints,
    write_model,
    write_plan,
    write_predictions,
)
from vms_accel.model import Fingerprint, Prediction
from vms_accel.perfmodel import OperandWidths, Workload, device_metrics, load_device, step_ledger
from vms_accel.quantize import TENSOR_ORDER, CalibrationInfo, QuantizationPlan, QuantizedModel, TensorId


def test_float_model_file(tmp_path, small_synthetic) -> None:
    model, _ = small_synthetic
    path = tmp_path / "model.bin"
    write_model(path, model)
    loaded = read_model(path)
    assert loaded.same_as(model)
    assert encode_model(loaded) == path.read_bytes()


@pytest.mark.parametrize(("link_width", "prot_width"), [(8, 8), (12, 16), (24, 32)])
def test_quantized_model_file(tmp_path, link_width: int, prot_width: int) -> None:
    rng = np.random.default_rng(link_width)
    link_fmt, prot_fmt = FixedFormat(link_width, link_width - 3), FixedFormat(prot_width, prot_width - 2)
    plan = QuantizationPlan(
        {
            TensorId.LINK: link_fmt,
            TensorId.PROT_LATENT: prot_fmt,
            TensorId.LATENT_INTERMEDIATE: FixedFormat(16, 10),
            TensorId.OUTPUT: FixedFormat(16, 11),
        },
        achieved_rmse=1.5e-3,
    )
    link = rng.integers(link_fmt.raw_min, link_fmt.raw_max, size=(2, 3, 5), endpoint=True)
    prot = rng.integers(prot_fmt.raw_min, prot_fmt.raw_max, size=(2, 4, 3), endpoint=True)
    link[0, 0, 0], link[1, 2, 4] = link_fmt.raw_min, link_fmt.raw_max
    qm = QuantizedModel(link, prot, plan)
    path = tmp_path / "q.bin"
    write_model(path, qm)
    loaded = read_model(path)
    assert isinstance(loaded, QuantizedModel)
    assert loaded.same_as(qm)
    assert loaded.plan.achieved_rmse == 1.5e-3


def test_quantized_container_is_narrow(small_synthetic) -> None:
    from vms_accel.quantize import quantize_model

    model, fps = small_synthetic
    wide_plan, narrow_plan = uniform_plan(model, fps, 16), uniform_plan(model, fps, 8)
    # Raw payload only; the embedded plan text differs in length.
    wide = len(encode_model(quantize_model(model, wide_plan))) - len(plan_to_yaml(wide_plan).encode())
    narrow = len(encode_model(quantize_model(model, narrow_plan))) - len(plan_to_yaml(narrow_plan).encode())
    s, k, f, p = model.dims
    assert wide - narrow == s * k * f + s * p * k


def test_model_decode_errors(small_synthetic) -> None:
    model, _ = small_synthetic
    data = encode_model(model)
    with pytest.raises(FileFormatError) as info:
        decode_model(b"XXXX" + data[4:], "m.bin")
    assert info.value.offset == 0
    assert str(info.value).startswith("m.bin@0")
    with pytest.raises(FileFormatError) as info:
        decode_model(data[:10])
    assert info.value.offset == 10
    with pytest.raises(FileFormatError):
        decode_model(data[:-8])
    with pytest.raises(FileFormatError) as info:
        decode_model(data[:4] + b"\x07\x00" + data[6:])
    assert info.value.offset == 4


def test_fingerprint_file_round_trip(tmp_path) -> None:
    fps = [Fingerprint("mol-1", (0, 3, 9)), Fingerprint("mol-2"), Fingerprint("x y", (5,))]
    path = tmp_path / "fps.tsv"
    write_fingerprints(path, fps)
    assert read_fingerprints(path, 10) == fps


def test_parse_fingerprints_skips_comments() -> None:
    text = "# header\n\nm1\t1,2\n# another\nm2\t\n"
    assert parse_fingerprints(text) == [Fingerprint("m1", (1, 2)), Fingerprint("m2")]


@pytest.mark.parametrize(
    ("text", "line"),
    [
        ("m1\t1,2\nm2\t3,1\n", 2),
        ("m1\t1\nm1\t2\n", 2),
        ("m1\t1\n# c\nm2\t1,x\n", 3),
        ("m1 1,2\n", 1),
        ("m1\t1\nm2\t99\n", 2),
        ("\t1\n", 1),
    ],
)
def test_parse_fingerprints_errors_name_line(text: str, line: int) -> None:
    with pytest.raises(FileFormatError) as info:
        parse_fingerprints(text, "fps.tsv", n_features=10)
    assert info.value.line == line
    assert str(info.value).startswith(f"fps.tsv:{line}:")


def test_predictions_file(tmp_path) -> None:
    preds = [Prediction("m1", 0, 0.1234567891234, 1e-12), Prediction("m1", 3, -2.0, 0.0)]
    path = tmp_path / "preds.csv"
    write_predictions(path, preds)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(PREDICTION_HEADER)
    assert lines[1] == "m1,0,0.123456789,1e-12"
    assert lines[2] == "m1,3,-2,0"
    back = read_predictions(path)
    assert back[1] == preds[1]
    assert back[0].mean == 0.123456789
    assert format_predictions([]) == "molecule_id,protein_idx,mean,std\n"


def test_predictions_file_errors(tmp_path) -> None:
    path = tmp_path / "bad.csv"
    path.write_text("id,p,mean,std\n", encoding="utf-8")
    with pytest.raises(FileFormatError) as info:
        read_predictions(path)
    assert info.value.line == 1
    path.write_text("molecule_id,protein_idx,mean,std\nm1,0,0.5\n", encoding="utf-8")
    with pytest.raises(FileFormatError) as info:
        read_predictions(path)
    assert info.value.line == 2


def test_plan_file_round_trip(tmp_path) -> None:
    plan = QuantizationPlan(
        {t: FixedFormat(8 if t is TensorId.LINK else 16, 6) for t in TENSOR_ORDER},
        achieved_rmse=2.5e-3,
        calibration=CalibrationInfo(100, 64, 16, seed=3),
        std_rmse=1e-3,
    )
    path = tmp_path / "plan.yaml"
    write_plan(path, plan)
    loaded = read_plan(path)
    assert loaded == plan
    assert plan_to_dict(plan)["tensors"]["LINK"] == "W8F6"


def test_plan_errors(tmp_path) -> None:
    with pytest.raises(FileFormatError):
        plan_from_dict({"tensors": {"LINK": "W8F7"}})
    with pytest.raises(FileFormatError):
        plan_from_dict({"tensors": {t.value: "W8F9" for t in TENSOR_ORDER}})
    with pytest.raises(FileFormatError):
        plan_from_dict([1, 2])
    path = tmp_path / "broken.yaml"
    path.write_text("achieved_rmse: 0.1\ntensors: [LINK, W8F7\n", encoding="utf-8")
    with pytest.raises(FileFormatError) as info:
        read_plan(path)
    assert info.value.line is not None


def test_device_table_formats() -> None:
    metrics = [device_metrics(load_device(name)) for name in ("paper-cpu", "paper-gpu", "paper-fpga")]
    csv_lines = format_device_table_csv(metrics).splitlines()
    assert csv_lines[0].startswith("device,kind,peak_gflops")
    assert csv_lines[3].split(",")[:5] == ["paper-fpga", "fpga", "684", "260", "38"]
    text = format_device_table_text(metrics)
    assert "paper-gpu" in text.splitlines()[0]
    assert "% of Peak Performance" in text


def test_ledger_csv() -> None:
    ledger = step_ledger(Workload(50, 4, 8, 32, 8, 4.0), load_device("paper-fpga"), OperandWidths.uniform(16))
    lines = format_ledger_csv(ledger).splitlines()
    assert lines[0] == "# reference total speedup 1351x"
    assert lines[2].startswith("step,name,seconds,factor,cumulative")
    assert len(lines) == 3 + len(ledger.steps)
    assert lines[3].startswith("1,baseline,")
    header = lines[2].split(",")
    assert header[7] == "pct_peak"
    first = lines[3].split(",")
    assert float(first[7]) == pytest.approx(ledger.steps[0].pct_peak, rel=1e-6)
