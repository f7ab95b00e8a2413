"""Fixed-point screening kernels: canonical (unblocked) and loop-blocked forms.

Per output the arithmetic is fixed:

* latent:    acc_u[s, k] = sum over active f of link_raw[s, k, f]
* narrow to the LATENT_INTERMEDIATE format (round half even, saturate)
* predict:   acc_y[s, p] = sum over k of u_q[s, k] * prot_raw[s, p, k]
* narrow to the OUTPUT format
* aggregate: mean and (S-1) standard deviation of y over samples, rounded into
  the OUTPUT format

Accumulations are exact integer sums, so blocking only restructures loop
control and every block configuration reproduces the canonical raws bit for
bit. Accumulators are int64 when the declared bound fits, Python ints
otherwise.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InputValidationError
from .fixedpoint import (
    DEFAULT_ACCUMULATOR_BITS,
    Accumulator,
    FixedFormat,
    FixedValue,
    container_dtype,
    dequantize,
    fx_accumulate,
    fx_mul,
    narrow_array,
    required_accumulator_bits,
)
from .model import Fingerprint, Prediction
from .quantize import QuantizedModel, TensorId

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockConfig:
    block_molecules: int = 16
    block_proteins: int = 16
    block_samples: int = 4
    block_latent: int = 8

    def __post_init__(self) -> None:
        for name in ("block_molecules", "block_proteins", "block_samples", "block_latent"):
            if getattr(self, name) < 1:
                raise InputValidationError(f"{name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def full(cls, n_molecules: int, n_proteins: int, n_samples: int, latent_dim: int) -> "BlockConfig":
        """A single block covering every dimension."""

        return cls(max(1, n_molecules), n_proteins, n_samples, latent_dim)

    def validate_for(self, n_molecules: int, n_proteins: int, n_samples: int, latent_dim: int) -> None:
        checks = (
            ("block_molecules", self.block_molecules, n_molecules),
            ("block_proteins", self.block_proteins, n_proteins),
            ("block_samples", self.block_samples, n_samples),
            ("block_latent", self.block_latent, latent_dim),
        )
        for name, block, dim in checks:
            if dim > 0 and block > dim:
                raise InputValidationError(f"{name}={block} exceeds dimension {dim}")

    def fit_to(self, n_molecules: int, n_proteins: int, n_samples: int, latent_dim: int) -> "BlockConfig":
        """Clamp every block size to its dimension."""

        return BlockConfig(
            max(1, min(self.block_molecules, n_molecules)),
            min(self.block_proteins, n_proteins),
            min(self.block_samples, n_samples),
            min(self.block_latent, latent_dim),
        )

    def to_dict(self) -> dict[str, int]:
        return {
            "molecules": self.block_molecules,
            "proteins": self.block_proteins,
            "samples": self.block_samples,
            "latent": self.block_latent,
        }


@dataclass(frozen=True, eq=False)
class KernelOutput:
    """Raw fixed-point results: y is (M, S, Pn), mean/std are (M, Pn), all OUTPUT-format raws."""

    molecule_ids: tuple[str, ...]
    proteins: tuple[int, ...]
    y_raw: np.ndarray
    mean_raw: np.ndarray
    std_raw: np.ndarray
    fmt: FixedFormat

    def same_raw(self, other: "KernelOutput") -> bool:
        return (
            self.molecule_ids == other.molecule_ids
            and self.proteins == other.proteins
            and self.fmt == other.fmt
            and np.array_equal(self.y_raw, other.y_raw)
            and np.array_equal(self.mean_raw, other.mean_raw)
            and np.array_equal(self.std_raw, other.std_raw)
        )

    def to_predictions(self) -> list[Prediction]:
        out = []
        for i, mol in enumerate(self.molecule_ids):
            for j, p in enumerate(self.proteins):
                out.append(
                    Prediction(
                        mol,
                        p,
                        dequantize(FixedValue(int(self.mean_raw[i, j]), self.fmt)),
                        dequantize(FixedValue(int(self.std_raw[i, j]), self.fmt)),
                    )
                )
        return out


def _round_div_half_even(num: int, den: int) -> int:
    q, r = divmod(num, den)
    twice = 2 * r
    if twice > den or (twice == den and q & 1):
        q += 1
    return q


def _round_sqrt_half_even(num: int, den: int) -> int:
    """Nearest integer to sqrt(num / den) for num >= 0, den > 0."""

    r = math.isqrt(num // den)
    cmp = 4 * num - (2 * r + 1) ** 2 * den
    if cmp > 0 or (cmp == 0 and r & 1):
        r += 1
    return r


def _sized_accumulator(term_fmt: FixedFormat, n_terms: int, context: str) -> Accumulator:
    """Accumulator at the term's fraction, wide enough for ``n_terms`` terms."""

    bits = max(DEFAULT_ACCUMULATOR_BITS, required_accumulator_bits(term_fmt.width, 0, n_terms))
    return Accumulator.for_workload(term_fmt.frac, term_fmt, n_terms, bits=bits, context=context)


def aggregate_raw(y: np.ndarray, fmt: FixedFormat) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sample std over axis 0 of the (S, Pn) raw scores, in exact integers."""

    n = y.shape[0]
    sq_fmt = FixedFormat(2 * fmt.width, 2 * fmt.frac)
    cols = y.T.tolist()
    mean = np.zeros(len(cols), dtype=np.int64)
    std = np.zeros(len(cols), dtype=np.int64)
    for j, col in enumerate(cols):
        total = _sized_accumulator(fmt, n, "aggregate sum")
        squares = _sized_accumulator(sq_fmt, n, "aggregate squares")
        for raw in col:
            v = FixedValue(raw, fmt)
            total = fx_accumulate(total, v)
            squares = fx_accumulate(squares, fx_mul(v, v))
        mean[j] = max(fmt.raw_min, min(fmt.raw_max, _round_div_half_even(total.raw, n)))
        if n > 1:
            spread = n * squares.raw - total.raw * total.raw
            std[j] = min(fmt.raw_max, _round_sqrt_half_even(spread, n * (n - 1)))
    return mean, std


class FixedPointPipeline:
    """The per-stage fixed-point numerics of one quantized model, structured by a BlockConfig."""

    def __init__(
        self,
        qm: QuantizedModel,
        proteins: Optional[Sequence[int]] = None,
        cfg: Optional[BlockConfig] = None,
    ) -> None:
        s, k, f, p = qm.dims
        self.qm = qm
        self.proteins = _check_proteins(proteins, p)
        self.cfg = cfg or BlockConfig.full(1, len(self.proteins) or 1, s, k)

        plan = qm.plan
        link_fmt = plan[TensorId.LINK]
        prot_fmt = plan[TensorId.PROT_LATENT]
        self.lat_fmt = plan[TensorId.LATENT_INTERMEDIATE]
        self.out_fmt = plan[TensorId.OUTPUT]
        self.lat_frac = link_fmt.frac
        self.pred_frac = self.lat_fmt.frac + prot_fmt.frac

        lat_bits = required_accumulator_bits(link_fmt.width, self.lat_fmt.frac - self.lat_frac, f)
        pred_bits = required_accumulator_bits(
            self.lat_fmt.width + prot_fmt.width, self.out_fmt.frac - self.pred_frac, k
        )
        self.lat_dtype = container_dtype(lat_bits)
        self.pred_dtype = container_dtype(pred_bits)
        self.prot_sel = np.ascontiguousarray(qm.prot_raw[:, list(self.proteins), :])
        if self.pred_dtype is object:
            self.prot_sel = self.prot_sel.astype(object)
        logger.debug(
            f"pipeline accumulators: latent {lat_bits} bits ({self.lat_dtype}), "
            f"predict {pred_bits} bits ({self.pred_dtype})"
        )

    def latent(self, fps: Sequence[Fingerprint]) -> np.ndarray:
        """(m, S, K) narrowed latent raws, computed per (sample block, latent block)."""

        s_dim, k_dim, _, _ = self.qm.dims
        bs, bk = self.cfg.block_samples, self.cfg.block_latent
        gather = self.qm.gather
        u_q = np.zeros((len(fps), s_dim, k_dim), dtype=np.int64)
        for s0 in range(0, s_dim, bs):
            s1 = min(s_dim, s0 + bs)
            for k0 in range(0, k_dim, bk):
                k1 = min(k_dim, k0 + bk)
                for i, fp in enumerate(fps):
                    cols = gather[list(fp.active), s0:s1, k0:k1]
                    if self.lat_dtype is object:
                        cols = cols.astype(object)
                    acc = cols.sum(axis=0) if fp.active else np.zeros((s1 - s0, k1 - k0), dtype=self.lat_dtype)
                    u_q[i, s0:s1, k0:k1] = narrow_array(acc, self.lat_frac, self.lat_fmt)
        return u_q

    def predict(self, u_q: np.ndarray) -> np.ndarray:
        """(m, S, Pn) narrowed per-sample score raws; latent blocks accumulate in ascending order."""

        m = u_q.shape[0]
        s_dim, k_dim, _, _ = self.qm.dims
        pn = len(self.proteins)
        bs, bp, bk = self.cfg.block_samples, self.cfg.block_proteins, self.cfg.block_latent
        u = u_q.astype(object) if self.pred_dtype is object else u_q
        y = np.zeros((m, s_dim, pn), dtype=np.int64)
        for s0 in range(0, s_dim, bs):
            s1 = min(s_dim, s0 + bs)
            for p0 in range(0, pn, bp):
                p1 = min(pn, p0 + bp)
                acc = np.zeros((m, s1 - s0, p1 - p0), dtype=self.pred_dtype)
                for k0 in range(0, k_dim, bk):
                    k1 = min(k_dim, k0 + bk)
                    lanes = u[:, s0:s1, None, k0:k1] * self.prot_sel[None, s0:s1, p0:p1, k0:k1]
                    acc = acc + lanes.sum(axis=-1)
                y[:, s0:s1, p0:p1] = narrow_array(acc, self.pred_frac, self.out_fmt)
        return y

    def aggregate(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(m, Pn) mean and std raws."""

        m, pn = y.shape[0], y.shape[2]
        mean = np.zeros((m, pn), dtype=np.int64)
        std = np.zeros((m, pn), dtype=np.int64)
        for i in range(m):
            mean[i], std[i] = aggregate_raw(y[i], self.out_fmt)
        return mean, std

    def emit(self, ids: Sequence[str], mean: np.ndarray, std: np.ndarray) -> list[Prediction]:
        out = KernelOutput(
            tuple(ids), self.proteins, np.zeros((len(ids), 0, len(self.proteins)), dtype=np.int64),
            mean, std, self.out_fmt,
        )
        return out.to_predictions()


def _check_proteins(proteins: Optional[Sequence[int]], n_proteins: int) -> tuple[int, ...]:
    if proteins is None:
        return tuple(range(n_proteins))
    out = tuple(int(p) for p in proteins)
    for p in out:
        if not 0 <= p < n_proteins:
            raise InputValidationError(f"protein index {p} out of range [0, {n_proteins})")
    return out


def check_fingerprints(qm: QuantizedModel, fps: Sequence[Fingerprint]) -> None:
    n_features = qm.dims[2]
    for fp in fps:
        fp.validate(n_features)


def run_unblocked_raw(
    qm: QuantizedModel,
    fps: Sequence[Fingerprint],
    proteins: Optional[Sequence[int]] = None,
) -> KernelOutput:
    """Canonical evaluation: one molecule at a time over full dimensions."""

    s_dim, k_dim, f_dim, p_dim = qm.dims
    prots = _check_proteins(proteins, p_dim)
    check_fingerprints(qm, fps)
    plan = qm.plan
    link_fmt, prot_fmt = plan[TensorId.LINK], plan[TensorId.PROT_LATENT]
    lat_fmt, out_fmt = plan[TensorId.LATENT_INTERMEDIATE], plan[TensorId.OUTPUT]
    lat_dtype = container_dtype(required_accumulator_bits(link_fmt.width, lat_fmt.frac - link_fmt.frac, f_dim))
    pred_frac = lat_fmt.frac + prot_fmt.frac
    pred_dtype = container_dtype(
        required_accumulator_bits(lat_fmt.width + prot_fmt.width, out_fmt.frac - pred_frac, k_dim)
    )
    prot = qm.prot_raw[:, list(prots), :].astype(pred_dtype)

    m = len(fps)
    y = np.zeros((m, s_dim, len(prots)), dtype=np.int64)
    mean = np.zeros((m, len(prots)), dtype=np.int64)
    std = np.zeros((m, len(prots)), dtype=np.int64)
    for i, fp in enumerate(fps):
        acc_u = qm.gather[list(fp.active)].astype(lat_dtype).sum(axis=0)
        if not fp.active:
            acc_u = np.zeros((s_dim, k_dim), dtype=lat_dtype)
        u_q = narrow_array(acc_u, link_fmt.frac, lat_fmt).astype(pred_dtype)
        acc_y = (u_q[:, None, :] * prot).sum(axis=-1)
        y[i] = narrow_array(acc_y, pred_frac, out_fmt)
        mean[i], std[i] = aggregate_raw(y[i], out_fmt)
    return KernelOutput(tuple(fp.molecule_id for fp in fps), prots, y, mean, std, out_fmt)


def run_unblocked(
    qm: QuantizedModel,
    fps: Sequence[Fingerprint],
    proteins: Optional[Sequence[int]] = None,
) -> list[Prediction]:
    return run_unblocked_raw(qm, fps, proteins).to_predictions()


def run_blocked_raw(
    qm: QuantizedModel,
    fps: Sequence[Fingerprint],
    cfg: BlockConfig,
    proteins: Optional[Sequence[int]] = None,
    *,
    workers: int = 1,
) -> KernelOutput:
    s_dim, k_dim, _, p_dim = qm.dims
    pipe = FixedPointPipeline(qm, proteins, cfg)
    cfg.validate_for(len(fps), len(pipe.proteins), s_dim, k_dim)
    check_fingerprints(qm, fps)

    blocks = [fps[i : i + cfg.block_molecules] for i in range(0, len(fps), cfg.block_molecules)]

    def run_block(block: Sequence[Fingerprint]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        y = pipe.predict(pipe.latent(block))
        mean, std = pipe.aggregate(y)
        return y, mean, std

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_block, blocks))
    else:
        results = [run_block(b) for b in blocks]

    pn = len(pipe.proteins)
    if results:
        y = np.concatenate([r[0] for r in results])
        mean = np.concatenate([r[1] for r in results])
        std = np.concatenate([r[2] for r in results])
    else:
        y = np.zeros((0, s_dim, pn), dtype=np.int64)
        mean = np.zeros((0, pn), dtype=np.int64)
        std = np.zeros((0, pn), dtype=np.int64)
    logger.debug(f"blocked run: {len(fps)} molecules in {len(blocks)} blocks with {cfg}")
    return KernelOutput(tuple(fp.molecule_id for fp in fps), pipe.proteins, y, mean, std, pipe.out_fmt)


def run_blocked(
    qm: QuantizedModel,
    fps: Sequence[Fingerprint],
    cfg: BlockConfig,
    proteins: Optional[Sequence[int]] = None,
    *,
    workers: int = 1,
) -> list[Prediction]:
    return run_blocked_raw(qm, fps, cfg, proteins, workers=workers).to_predictions()


__all__ = [
    "BlockConfig",
    "FixedPointPipeline",
    "KernelOutput",
    "aggregate_raw",
    "run_blocked",
    "run_blocked_raw",
    "run_unblocked",
    "run_unblocked_raw",
]
