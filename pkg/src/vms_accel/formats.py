"""On-disk formats: model container, fingerprint lists, predictions, plans and reports.

Binary model layout (all little-endian)::

    b"VMS1" | u16 version | u32 S K F P | u8 flag
    flag 0: S*K*F link float64, then S*P*K protein-latent float64
    flag 1: u32 plan length | plan YAML (UTF-8) | link raws | protein raws,
            each raw a two's complement integer in ceil(width / 8) bytes

Every parse error names the file and the line (text) or byte offset (binary).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np
import yaml

from .errors import FileFormatError, InputValidationError
from .fixedpoint import parse_format
from .model import Fingerprint, Prediction, ScreeningModel
from .quantize import TENSOR_ORDER, CalibrationInfo, QuantizationPlan, QuantizedModel, TensorId

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MODEL_MAGIC = b"VMS1"
MODEL_VERSION = 1
FLAG_FLOAT64 = 0
FLAG_QUANTIZED = 1
_HEADER = struct.Struct("<4sHIIIIB")
_U32 = struct.Struct("<I")

PREDICTION_HEADER = ("molecule_id", "protein_idx", "mean", "std")


def _g9(x: float) -> str:
    return f"{x:.9g}"


# --- quantization plan -------------------------------------------------------


def plan_to_dict(plan: QuantizationPlan) -> dict[str, Any]:
    return {
        "tensors": {t.value: str(plan[t]) for t in TENSOR_ORDER},
        "achieved_rmse": float(plan.achieved_rmse),
        "std_rmse": None if plan.std_rmse is None else float(plan.std_rmse),
        "calibration": None if plan.calibration is None else plan.calibration.to_dict(),
    }


def plan_to_yaml(plan: QuantizationPlan) -> str:
    return yaml.safe_dump(plan_to_dict(plan), sort_keys=False, default_flow_style=False)


def plan_from_dict(data: Any, source: Optional[PathLike] = None) -> QuantizationPlan:
    if not isinstance(data, dict) or not isinstance(data.get("tensors"), dict):
        raise FileFormatError(source, "plan must be a mapping with a 'tensors' section")
    formats = {}
    for tensor in TENSOR_ORDER:
        text = data["tensors"].get(tensor.value)
        if text is None:
            raise FileFormatError(source, f"plan has no format for {tensor.value}")
        try:
            formats[tensor] = parse_format(str(text))
        except InputValidationError as exc:
            raise FileFormatError(source, f"{tensor.value}: {exc}") from exc
    calib = data.get("calibration")
    info = None
    if calib is not None:
        try:
            info = CalibrationInfo(
                int(calib["n_molecules"]), int(calib["n_proteins"]), int(calib["n_samples"]), calib.get("seed")
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(source, f"invalid calibration section: {exc}") from exc
    try:
        std = data.get("std_rmse")
        return QuantizationPlan(
            formats,
            achieved_rmse=float(data.get("achieved_rmse", 0.0)),
            calibration=info,
            std_rmse=None if std is None else float(std),
        )
    except (TypeError, ValueError) as exc:
        raise FileFormatError(source, f"invalid plan: {exc}") from exc


def load_yaml(path: PathLike) -> Any:
    """yaml.safe_load with errors mapped to FileFormatError naming the line."""

    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FileFormatError(path, f"not UTF-8 text: {exc}", offset=exc.start) from exc
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise FileFormatError(path, f"invalid YAML: {exc}", line=mark.line + 1 if mark else None) from exc


def write_plan(path: PathLike, plan: QuantizationPlan) -> None:
    Path(path).write_text(plan_to_yaml(plan), encoding="utf-8")
    logger.info(f"wrote plan {path}")


def read_plan(path: PathLike) -> QuantizationPlan:
    return plan_from_dict(load_yaml(path), path)


# --- model container ---------------------------------------------------------


def _raw_bytes(width: int) -> int:
    return math.ceil(width / 8)


def _encode_raws(raw: np.ndarray, width: int) -> bytes:
    nbytes = _raw_bytes(width)
    wide = np.ascontiguousarray(raw, dtype="<i8").reshape(-1)
    return wide.view(np.uint8).reshape(-1, 8)[:, :nbytes].tobytes()


def _decode_raws(buf: bytes, width: int, count: int) -> np.ndarray:
    nbytes = _raw_bytes(width)
    narrow = np.frombuffer(buf, dtype=np.uint8).reshape(count, nbytes)
    wide = np.zeros((count, 8), dtype=np.uint8)
    wide[:, :nbytes] = narrow
    negative = narrow[:, -1] >= 0x80
    wide[negative, nbytes:] = 0xFF
    return wide.reshape(-1).view("<i8").astype(np.int64)


def encode_model(model: Union[ScreeningModel, QuantizedModel]) -> bytes:
    if isinstance(model, QuantizedModel):
        s, k, f, p = model.dims
        plan_bytes = plan_to_yaml(model.plan).encode("utf-8")
        parts = [
            _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, s, k, f, p, FLAG_QUANTIZED),
            _U32.pack(len(plan_bytes)),
            plan_bytes,
            _encode_raws(model.link_raw, model.plan[TensorId.LINK].width),
            _encode_raws(model.prot_raw, model.plan[TensorId.PROT_LATENT].width),
        ]
    else:
        s, k, f, p = model.dims
        parts = [
            _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, s, k, f, p, FLAG_FLOAT64),
            np.ascontiguousarray(model.link, dtype="<f8").tobytes(),
            np.ascontiguousarray(model.protein_latents, dtype="<f8").tobytes(),
        ]
    return b"".join(parts)


def decode_model(data: bytes, source: Optional[PathLike] = None) -> Union[ScreeningModel, QuantizedModel]:
    if len(data) < _HEADER.size:
        raise FileFormatError(source, f"truncated header ({len(data)} bytes)", offset=len(data))
    magic, version, s, k, f, p, flag = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise FileFormatError(source, f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", offset=0)
    if version != MODEL_VERSION:
        raise FileFormatError(source, f"unsupported version {version}", offset=4)
    if min(s, k, f, p) < 1:
        raise FileFormatError(source, f"dimensions must be >= 1, got S={s} K={k} F={f} P={p}", offset=6)
    pos = _HEADER.size

    if flag == FLAG_FLOAT64:
        n_link, n_prot = s * k * f, s * p * k
        expected = pos + 8 * (n_link + n_prot)
        if len(data) != expected:
            raise FileFormatError(source, f"payload length {len(data)} != expected {expected}", offset=pos)
        link = np.frombuffer(data, dtype="<f8", count=n_link, offset=pos).reshape(s, k, f)
        prot = np.frombuffer(data, dtype="<f8", count=n_prot, offset=pos + 8 * n_link).reshape(s, p, k)
        try:
            return ScreeningModel(link.astype(np.float64), prot.astype(np.float64))
        except InputValidationError as exc:
            raise FileFormatError(source, str(exc), offset=pos) from exc

    if flag != FLAG_QUANTIZED:
        raise FileFormatError(source, f"unknown payload flag {flag}", offset=_HEADER.size - 1)
    if len(data) < pos + _U32.size:
        raise FileFormatError(source, "truncated plan length", offset=pos)
    (plan_len,) = _U32.unpack_from(data, pos)
    pos += _U32.size
    if len(data) < pos + plan_len:
        raise FileFormatError(source, f"truncated plan block ({plan_len} bytes declared)", offset=pos)
    try:
        plan_doc = yaml.safe_load(data[pos : pos + plan_len].decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as exc:
        raise FileFormatError(source, f"unreadable plan block: {exc}", offset=pos) from exc
    plan = plan_from_dict(plan_doc, source)
    pos += plan_len

    w_link, w_prot = plan[TensorId.LINK].width, plan[TensorId.PROT_LATENT].width
    n_link, n_prot = s * k * f, s * p * k
    link_len, prot_len = n_link * _raw_bytes(w_link), n_prot * _raw_bytes(w_prot)
    expected = pos + link_len + prot_len
    if len(data) != expected:
        raise FileFormatError(source, f"payload length {len(data)} != expected {expected}", offset=pos)
    link = _decode_raws(data[pos : pos + link_len], w_link, n_link).reshape(s, k, f)
    prot = _decode_raws(data[pos + link_len :], w_prot, n_prot).reshape(s, p, k)
    try:
        return QuantizedModel(link, prot, plan)
    except InputValidationError as exc:
        raise FileFormatError(source, str(exc), offset=pos) from exc


def write_model(path: PathLike, model: Union[ScreeningModel, QuantizedModel]) -> None:
    Path(path).write_bytes(encode_model(model))
    logger.info(f"wrote model {path}")


def read_model(path: PathLike) -> Union[ScreeningModel, QuantizedModel]:
    return decode_model(Path(path).read_bytes(), path)


# --- fingerprints ------------------------------------------------------------


def format_fingerprints(fps: Iterable[Fingerprint]) -> str:
    return "".join(f"{fp.molecule_id}\t{','.join(str(i) for i in fp.active)}\n" for fp in fps)


def parse_fingerprints(
    text: str, source: Optional[PathLike] = None, n_features: Optional[int] = None
) -> list[Fingerprint]:
    fps: list[Fingerprint] = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        mol, sep, rest = line.partition("\t")
        if not sep:
            raise FileFormatError(source, "expected '<molecule_id><TAB><indices>'", line=lineno)
        if not mol:
            raise FileFormatError(source, "empty molecule id", line=lineno)
        if mol in seen:
            raise FileFormatError(source, f"duplicate molecule id {mol!r}", line=lineno)
        rest = rest.strip()
        try:
            active = tuple(int(tok) for tok in rest.split(",")) if rest else ()
        except ValueError as exc:
            raise FileFormatError(source, f"non-integer feature index: {exc}", line=lineno) from exc
        try:
            fp = Fingerprint(mol, active)
            if n_features is not None:
                fp.validate(n_features)
        except InputValidationError as exc:
            raise FileFormatError(source, str(exc), line=lineno) from exc
        seen.add(mol)
        fps.append(fp)
    return fps


def write_fingerprints(path: PathLike, fps: Iterable[Fingerprint]) -> None:
    Path(path).write_text(format_fingerprints(fps), encoding="utf-8")
    logger.info(f"wrote fingerprints {path}")


def read_fingerprints(path: PathLike, n_features: Optional[int] = None) -> list[Fingerprint]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FileFormatError(path, f"not UTF-8 text: {exc}", offset=exc.start) from exc
    return parse_fingerprints(text, path, n_features)


# --- predictions -------------------------------------------------------------


def format_predictions(preds: Iterable[Prediction]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PREDICTION_HEADER)
    for pr in preds:
        writer.writerow((pr.molecule_id, pr.protein_idx, _g9(pr.mean), _g9(pr.std)))
    return buf.getvalue()


def write_predictions(path: PathLike, preds: Iterable[Prediction]) -> None:
    Path(path).write_text(format_predictions(preds), encoding="utf-8")
    logger.info(f"wrote predictions {path}")


def read_predictions(path: PathLike) -> list[Prediction]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != PREDICTION_HEADER:
            raise FileFormatError(path, f"expected header {','.join(PREDICTION_HEADER)}", line=1)
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise FileFormatError(path, f"expected 4 fields, got {len(row)}", line=lineno)
            try:
                out.append(Prediction(row[0], int(row[1]), float(row[2]), float(row[3])))
            except ValueError as exc:
                raise FileFormatError(path, str(exc), line=lineno) from exc
    return out


# --- reports -----------------------------------------------------------------


def write_yaml(path: PathLike, doc: Any) -> None:
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False, default_flow_style=False), encoding="utf-8")
    logger.info(f"wrote {path}")


TABLE_ROWS: tuple[tuple[str, str], ...] = (
    ("Peak Performance (GF/s)", "peak_gflops"),
    ("Achieved Performance (GF/s)", "achieved_gflops"),
    ("% of Peak Performance", "pct_peak_rounded"),
    ("Power (Watt)", "power_watts"),
    ("Energy Efficiency (GF/s/Watt)", "gflops_per_watt"),
    ("Reported Efficiency (GF/s/Watt)", "reported_efficiency"),
    ("Peak per Watt (GF/s/Watt)", "peak_gflops_per_watt"),
)


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def format_device_table_csv(metrics: Sequence[Any]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        (
            "device",
            "kind",
            "peak_gflops",
            "achieved_gflops",
            "pct_peak",
            "power_watts",
            "gflops_per_watt",
            "reported_gflops_per_watt",
            "peak_gflops_per_watt",
        )
    )
    for m in metrics:
        writer.writerow(
            (
                m.name,
                m.kind.value,
                _g9(m.peak_gflops),
                _g9(m.achieved_gflops),
                m.pct_peak_rounded,
                _g9(m.power_watts),
                _g9(m.gflops_per_watt),
                "" if m.reported_efficiency is None else _g9(m.reported_efficiency),
                _g9(m.peak_gflops_per_watt),
            )
        )
    return buf.getvalue()


def format_device_table_text(metrics: Sequence[Any]) -> str:
    """Devices as columns, metrics as rows, aligned for a terminal."""

    header = [""] + [m.name for m in metrics]
    rows = [header] + [[label] + [_cell(getattr(m, attr)) for m in metrics] for label, attr in TABLE_ROWS]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def format_ledger_csv(ledger: Any) -> str:
    buf = io.StringIO()
    buf.write(f"# reference total speedup {ledger.reference_speedup}x\n")
    buf.write(f"# reference resource growth {ledger.reference_resource_growth}x\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ("step", "name", "seconds", "factor", "cumulative", "dsp_used", "dsp_pct", "pct_peak", "limiting_factor", "overlap")
    )
    for i, step in enumerate(ledger.steps, start=1):
        est = step.estimate
        writer.writerow(
            (
                i,
                step.name,
                _g9(est.seconds),
                _g9(float(step.factor)),
                _g9(float(step.cumulative)),
                _g9(est.resources.dsp_used),
                _g9(est.resources.dsp_pct),
                _g9(step.pct_peak),
                est.limiting_factor.value,
                str(step.overlap).lower(),
            )
        )
    return buf.getvalue()


__all__ = [
    "MODEL_MAGIC",
    "MODEL_VERSION",
    "PREDICTION_HEADER",
    "decode_model",
    "encode_model",
    "format_device_table_csv",
    "format_device_table_text",
    "format_fingerprints",
    "format_ledger_csv",
    "format_predictions",
    "load_yaml",
    "parse_fingerprints",
    "plan_from_dict",
    "plan_to_dict",
    "plan_to_yaml",
    "read_fingerprints",
    "read_model",
    "read_plan",
    "read_predictions",
    "write_fingerprints",
    "write_model",
    "write_plan",
    "write_predictions",
    "write_yaml",
]
