"""Range profiling and automatic fixed-point refinement of a screening model.

The refinement starts every tensor at the widest candidate width and then, one
tensor at a time in storage-critical order, narrows it as far as the RMSE
budget on the calibration set allows. Accuracy is measured on prediction means
against the float64 reference kernel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InfeasibleError, InputValidationError, LimitingFactor
from .fixedpoint import (
    MAX_STORAGE_WIDTH,
    MIN_WIDTH,
    FixedFormat,
    dequantize_array,
    quantize_array,
)
from .model import Fingerprint, ScreeningModel, mean_std, rmse, sample_latents, sample_scores

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 1e-2
DEFAULT_WIDTHS: tuple[int, ...] = (16, 8)


class TensorId(str, Enum):
    """Tensors that receive their own fixed-point format."""

    LINK = "LINK"
    PROT_LATENT = "PROT_LATENT"
    LATENT_INTERMEDIATE = "LATENT_INTERMEDIATE"
    OUTPUT = "OUTPUT"


# Refinement order: most to least storage-critical.
TENSOR_ORDER: tuple[TensorId, ...] = (
    TensorId.LINK,
    TensorId.PROT_LATENT,
    TensorId.LATENT_INTERMEDIATE,
    TensorId.OUTPUT,
)


@dataclass(frozen=True)
class TensorStats:
    tensor_id: TensorId
    absmax: float
    min: float
    max: float
    count: int

    @classmethod
    def of(cls, tensor_id: TensorId, values: np.ndarray) -> "TensorStats":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise InputValidationError(f"no values observed for {tensor_id.value}")
        lo = float(values.min())
        hi = float(values.max())
        return cls(tensor_id, max(abs(lo), abs(hi)), lo, hi, int(values.size))

    def merged(self, other: "TensorStats") -> "TensorStats":
        lo = min(self.min, other.min)
        hi = max(self.max, other.max)
        return TensorStats(self.tensor_id, max(abs(lo), abs(hi)), lo, hi, self.count + other.count)


@dataclass(frozen=True)
class CalibrationInfo:
    """Describes the calibration set a plan was fitted on."""

    n_molecules: int
    n_proteins: int
    n_samples: int
    seed: Optional[int] = None

    def to_dict(self) -> dict[str, object]:
        return {
            "seed": self.seed,
            "n_molecules": self.n_molecules,
            "n_proteins": self.n_proteins,
            "n_samples": self.n_samples,
        }


@dataclass(frozen=True)
class QuantizationPlan:
    formats: Mapping[TensorId, FixedFormat]
    achieved_rmse: float = 0.0
    calibration: Optional[CalibrationInfo] = None
    std_rmse: Optional[float] = None

    def __post_init__(self) -> None:
        missing = [t.value for t in TENSOR_ORDER if t not in self.formats]
        if missing:
            raise InputValidationError(f"plan is missing formats for {', '.join(missing)}")
        for t in TENSOR_ORDER:
            if self.formats[t].width > MAX_STORAGE_WIDTH:
                raise InputValidationError(
                    f"{t.value} format {self.formats[t]} is wider than the {MAX_STORAGE_WIDTH}-bit storage limit"
                )
        if not self.achieved_rmse >= 0.0:
            raise InputValidationError(f"achieved_rmse must be >= 0, got {self.achieved_rmse}")
        object.__setattr__(self, "formats", {t: self.formats[t] for t in TENSOR_ORDER})

    def __getitem__(self, tensor_id: TensorId) -> FixedFormat:
        return self.formats[tensor_id]

    def with_format(self, tensor_id: TensorId, fmt: FixedFormat) -> "QuantizationPlan":
        formats = dict(self.formats)
        formats[tensor_id] = fmt
        return replace(self, formats=formats)

    def widths(self) -> dict[TensorId, int]:
        return {t: f.width for t, f in self.formats.items()}


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """Model weights as raw integers under the plan's LINK / PROT_LATENT formats."""

    link_raw: np.ndarray
    prot_raw: np.ndarray
    plan: QuantizationPlan
    _gather: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        link = np.asarray(self.link_raw, dtype=np.int64)
        prot = np.asarray(self.prot_raw, dtype=np.int64)
        if link.ndim != 3 or prot.ndim != 3 or link.shape[0] != prot.shape[0] or link.shape[1] != prot.shape[2]:
            raise InputValidationError(f"inconsistent quantized shapes {link.shape} / {prot.shape}")
        for name, arr, fmt in (
            ("link", link, self.plan[TensorId.LINK]),
            ("protein latents", prot, self.plan[TensorId.PROT_LATENT]),
        ):
            if arr.size and (arr.min() < fmt.raw_min or arr.max() > fmt.raw_max):
                raise InputValidationError(f"{name} raw values exceed {fmt}")
        link.setflags(write=False)
        prot.setflags(write=False)
        gather = np.ascontiguousarray(link.transpose(2, 0, 1))
        gather.setflags(write=False)
        object.__setattr__(self, "link_raw", link)
        object.__setattr__(self, "prot_raw", prot)
        object.__setattr__(self, "_gather", gather)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        s, k, f = self.link_raw.shape
        return int(s), int(k), int(f), int(self.prot_raw.shape[1])

    @property
    def gather(self) -> np.ndarray:
        """Feature-major (F, S, K) view of the link raws."""

        return self._gather

    def dequantized(self) -> ScreeningModel:
        return ScreeningModel(
            dequantize_array(self.link_raw, self.plan[TensorId.LINK]),
            dequantize_array(self.prot_raw, self.plan[TensorId.PROT_LATENT]),
        )

    def same_as(self, other: "QuantizedModel") -> bool:
        return (
            self.plan.formats == other.plan.formats
            and np.array_equal(self.link_raw, other.link_raw)
            and np.array_equal(self.prot_raw, other.prot_raw)
        )


def _require_calib(calib: Sequence[Fingerprint], model: ScreeningModel) -> None:
    if not calib:
        raise InputValidationError("calibration set is empty")
    for fp in calib:
        fp.validate(model.n_features)


def profile_ranges(model: ScreeningModel, calib: Sequence[Fingerprint]) -> list[TensorStats]:
    """Observed value ranges of the four tensors over the calibration set.

    Weights are profiled directly; latents and per-sample scores come from
    running the reference kernel on every calibration molecule, all samples and
    all proteins.
    """

    _require_calib(calib, model)
    all_proteins = range(model.n_proteins)
    latent: Optional[TensorStats] = None
    output: Optional[TensorStats] = None
    for fp in calib:
        u = sample_latents(model, fp)
        y = sample_scores(model, u, all_proteins)
        u_stats = TensorStats.of(TensorId.LATENT_INTERMEDIATE, u)
        y_stats = TensorStats.of(TensorId.OUTPUT, y)
        latent = u_stats if latent is None else latent.merged(u_stats)
        output = y_stats if output is None else output.merged(y_stats)
    stats = [
        TensorStats.of(TensorId.LINK, model.link),
        TensorStats.of(TensorId.PROT_LATENT, model.protein_latents),
        latent,
        output,
    ]
    for s in stats:
        logger.debug(f"profile {s.tensor_id.value}: min={s.min:.6g} max={s.max:.6g} n={s.count}")
    return stats


def _int_bits_for(absmax: float) -> int:
    """Smallest non-negative n with absmax <= 2**n."""

    if absmax <= 0.0:
        return 0
    mantissa, exponent = math.frexp(absmax)  # absmax = mantissa * 2**exponent, 0.5 <= mantissa < 1
    ceil_log2 = exponent - 1 if mantissa == 0.5 else exponent
    return max(0, ceil_log2)


def select_format(stats: TensorStats, width: int) -> FixedFormat:
    if not MIN_WIDTH <= width <= MAX_STORAGE_WIDTH:
        raise InputValidationError(f"width must be in [{MIN_WIDTH}, {MAX_STORAGE_WIDTH}], got {width}")
    int_bits = _int_bits_for(stats.absmax)
    frac = width - 1 - int_bits
    if frac < 0:
        raise InfeasibleError(
            f"{stats.tensor_id.value} range {stats.absmax:.6g} needs {int_bits} integer bits, "
            f"more than a {width}-bit format holds",
            LimitingFactor.RANGE,
        )
    return FixedFormat(width, frac)


def quantize_model(model: ScreeningModel, plan: QuantizationPlan) -> QuantizedModel:
    return QuantizedModel(
        quantize_array(model.link, plan[TensorId.LINK]),
        quantize_array(model.protein_latents, plan[TensorId.PROT_LATENT]),
        plan,
    )


def _reference_means(model: ScreeningModel, calib: Sequence[Fingerprint]) -> tuple[np.ndarray, np.ndarray]:
    proteins = range(model.n_proteins)
    means, stds = [], []
    for fp in calib:
        mean, std = mean_std(sample_scores(model, sample_latents(model, fp), proteins))
        means.append(mean)
        stds.append(std)
    return np.concatenate(means), np.concatenate(stds)


def _quantized_means(
    model: ScreeningModel, calib: Sequence[Fingerprint], plan: QuantizationPlan
) -> tuple[np.ndarray, np.ndarray]:
    from .kernel import run_unblocked_raw

    qm = quantize_model(model, plan)
    out = run_unblocked_raw(qm, calib)
    fmt = plan[TensorId.OUTPUT]
    return (
        dequantize_array(out.mean_raw, fmt).ravel(),
        dequantize_array(out.std_raw, fmt).ravel(),
    )


def evaluate_plan(
    model: ScreeningModel, calib: Sequence[Fingerprint], plan: QuantizationPlan
) -> tuple[float, float]:
    """Re-evaluate ``plan`` from scratch: (RMSE of means, RMSE of stds)."""

    _require_calib(calib, model)
    ref_mean, ref_std = _reference_means(model, calib)
    q_mean, q_std = _quantized_means(model, calib, plan)
    return rmse(q_mean, ref_mean), rmse(q_std, ref_std)


def _check_widths(widths: Sequence[int]) -> tuple[int, ...]:
    widths = tuple(int(w) for w in widths)
    if not widths:
        raise InputValidationError("at least one candidate width is required")
    for w in widths:
        if not MIN_WIDTH <= w <= MAX_STORAGE_WIDTH:
            raise InputValidationError(f"candidate width {w} outside [{MIN_WIDTH}, {MAX_STORAGE_WIDTH}]")
    if any(b >= a for a, b in zip(widths, widths[1:])):
        raise InputValidationError(f"candidate widths must be strictly descending, got {list(widths)}")
    return widths


def refine_bitwidths(
    model: ScreeningModel,
    calib: Sequence[Fingerprint],
    budget: float = DEFAULT_BUDGET,
    widths: Sequence[int] = DEFAULT_WIDTHS,
    *,
    seed: Optional[int] = None,
) -> QuantizationPlan:
    """Greedy per-tensor bit-width reduction under an RMSE budget on prediction means."""

    if not (math.isfinite(budget) and budget > 0.0):
        raise InputValidationError(f"budget must be finite and > 0, got {budget}")
    widths = _check_widths(widths)
    _require_calib(calib, model)

    stats = {s.tensor_id: s for s in profile_ranges(model, calib)}
    ref_mean, ref_std = _reference_means(model, calib)
    info = CalibrationInfo(len(calib), model.n_proteins, model.n_samples, seed)

    def score(plan: QuantizationPlan) -> tuple[float, float]:
        q_mean, q_std = _quantized_means(model, calib, plan)
        return rmse(q_mean, ref_mean), rmse(q_std, ref_std)

    plan = QuantizationPlan({t: select_format(stats[t], widths[0]) for t in TENSOR_ORDER}, calibration=info)
    best_rmse, best_std = score(plan)
    logger.info(f"widest plan W{widths[0]}: rmse={best_rmse:.3e}")
    if best_rmse > budget:
        raise InfeasibleError(
            f"RMSE {best_rmse:.3e} at the widest candidate ({widths[0]} bits) exceeds budget {budget:.3e}",
            LimitingFactor.BUDGET,
        )

    for tensor in TENSOR_ORDER:
        for width in widths[1:]:
            try:
                fmt = select_format(stats[tensor], width)
            except InfeasibleError:
                logger.debug(f"{tensor.value}: {width} bits cannot hold the observed range")
                continue
            candidate = plan.with_format(tensor, fmt)
            cand_rmse, cand_std = score(candidate)
            logger.debug(f"{tensor.value} -> {fmt}: rmse={cand_rmse:.3e}")
            if cand_rmse <= budget:
                plan, best_rmse, best_std = candidate, cand_rmse, cand_std
        logger.info(f"{tensor.value} frozen at {plan[tensor]}")

    return replace(plan, achieved_rmse=best_rmse, std_rmse=best_std)


__all__ = [
    "CalibrationInfo",
    "DEFAULT_BUDGET",
    "DEFAULT_WIDTHS",
    "QuantizationPlan",
    "QuantizedModel",
    "TENSOR_ORDER",
    "TensorId",
    "TensorStats",
    "evaluate_plan",
    "profile_ranges",
    "quantize_model",
    "refine_bitwidths",
    "select_format",
]
