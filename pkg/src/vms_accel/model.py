"""Screening model types and the double-precision reference prediction kernel.

A ScreeningModel is a stack of S frozen posterior samples. Each sample holds a
link matrix mapping a binary fingerprint to a K-dimensional latent vector and
a protein latent matrix scoring that vector against P targets. Predictions
average the per-sample scores and report their spread as confidence.

Latent and score reductions run in ascending index order (features, then
latent dims); the sample reduction uses correctly rounded sums. Repeated runs
are bit-identical, and the fixed-point kernels are checked against this module.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InputValidationError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 16
DEFAULT_LATENT = 32
DEFAULT_FEATURES = 1024
DEFAULT_PROTEINS = 64


@dataclass(frozen=True, eq=False)
class ScreeningModel:
    """S posterior samples: ``link`` is (S, K, F), ``protein_latents`` is (S, P, K)."""

    link: np.ndarray
    protein_latents: np.ndarray

    def __post_init__(self) -> None:
        link = np.asarray(self.link, dtype=np.float64)
        prot = np.asarray(self.protein_latents, dtype=np.float64)
        if link.ndim != 3 or prot.ndim != 3:
            raise InputValidationError(
                f"link must be (S, K, F) and protein_latents (S, P, K); got {link.shape} and {prot.shape}"
            )
        if min(link.shape) < 1 or min(prot.shape) < 1:
            raise InputValidationError(f"all model dimensions must be >= 1, got {link.shape} / {prot.shape}")
        if prot.shape[0] != link.shape[0] or prot.shape[2] != link.shape[1]:
            raise InputValidationError(
                f"sample/latent dimensions disagree: link {link.shape} vs protein_latents {prot.shape}"
            )
        if not (np.isfinite(link).all() and np.isfinite(prot).all()):
            raise InputValidationError("model contains NaN or infinite entries")
        link.setflags(write=False)
        prot.setflags(write=False)
        object.__setattr__(self, "link", link)
        object.__setattr__(self, "protein_latents", prot)
        # Feature-major copy so a fingerprint gathers contiguous (S, K) slabs.
        gather = np.ascontiguousarray(link.transpose(2, 0, 1))
        gather.setflags(write=False)
        object.__setattr__(self, "_gather", gather)

    @property
    def n_samples(self) -> int:
        return int(self.link.shape[0])

    @property
    def latent_dim(self) -> int:
        return int(self.link.shape[1])

    @property
    def n_features(self) -> int:
        return int(self.link.shape[2])

    @property
    def n_proteins(self) -> int:
        return int(self.protein_latents.shape[1])

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(S, K, F, P)."""

        return self.n_samples, self.latent_dim, self.n_features, self.n_proteins

    def same_as(self, other: "ScreeningModel") -> bool:
        """Bit-for-bit equality of both tensors."""

        return (
            self.link.shape == other.link.shape
            and self.protein_latents.shape == other.protein_latents.shape
            and np.array_equal(self.link, other.link)
            and np.array_equal(self.protein_latents, other.protein_latents)
        )


@dataclass(frozen=True)
class Fingerprint:
    """Binary chemical fingerprint: the sorted active feature indices of one molecule."""

    molecule_id: str
    active: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        active = tuple(int(i) for i in self.active)
        for prev, cur in zip(active, active[1:]):
            if cur <= prev:
                raise InputValidationError(
                    f"molecule {self.molecule_id!r}: feature indices must be strictly increasing ({prev} then {cur})"
                )
        if active and active[0] < 0:
            raise InputValidationError(f"molecule {self.molecule_id!r}: negative feature index {active[0]}")
        object.__setattr__(self, "active", active)

    @property
    def nnz(self) -> int:
        return len(self.active)

    def validate(self, n_features: int) -> None:
        """Raise if any index falls outside ``[0, n_features)``."""

        if self.active and self.active[-1] >= n_features:
            raise InputValidationError(
                f"molecule {self.molecule_id!r}: feature index {self.active[-1]} out of range [0, {n_features})"
            )

    def union(self, other: "Fingerprint", molecule_id: Optional[str] = None) -> "Fingerprint":
        merged = sorted(set(self.active) | set(other.active))
        return Fingerprint(molecule_id or f"{self.molecule_id}+{other.molecule_id}", tuple(merged))


@dataclass(frozen=True)
class Prediction:
    """Mean and sample standard deviation of the S per-sample scores."""

    molecule_id: str
    protein_idx: int
    mean: float
    std: float


@dataclass(frozen=True, eq=False)
class LatentVector:
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass
class OpCounter:
    """Counts MACs executed by the reference kernel (gather-adds count as MACs)."""

    latent_macs: int = 0
    predict_macs: int = 0

    @property
    def macs(self) -> int:
        return self.latent_macs + self.predict_macs


def _check_sample(model: ScreeningModel, sample: int) -> None:
    if not 0 <= sample < model.n_samples:
        raise InputValidationError(f"sample index {sample} out of range [0, {model.n_samples})")


def _check_protein(model: ScreeningModel, protein: int) -> None:
    if not 0 <= protein < model.n_proteins:
        raise InputValidationError(f"protein index {protein} out of range [0, {model.n_proteins})")


def sample_latents(model: ScreeningModel, fp: Fingerprint) -> np.ndarray:
    """(S, K) latent vectors; features summed one at a time in ascending order."""

    u = np.zeros((model.n_samples, model.latent_dim), dtype=np.float64)
    for slab in model._gather[list(fp.active)]:
        u += slab
    return u


def sample_scores(model: ScreeningModel, u: np.ndarray, proteins: Sequence[int]) -> np.ndarray:
    """(S, len(proteins)) per-sample scores; latent dims summed in ascending order."""

    prot = model.protein_latents[:, list(proteins), :]
    y = np.zeros((model.n_samples, len(proteins)), dtype=np.float64)
    for k in range(model.latent_dim):
        y += u[:, k : k + 1] * prot[:, :, k]
    return y


def mean_std(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise mean and (S-1)-denominator std over the sample axis.

    Sums use math.fsum (correctly rounded), so both results are independent of
    sample order.
    """

    n = y.shape[0]
    mean = np.array([math.fsum(col) for col in y.T], dtype=np.float64) / n
    if n == 1:
        return mean, np.zeros_like(mean)
    dev = y - mean
    sq = np.array([math.fsum(col) for col in (dev * dev).T], dtype=np.float64)
    return mean, np.sqrt(sq / (n - 1))


def compute_latent(model: ScreeningModel, sample: int, fp: Fingerprint) -> LatentVector:
    """Gather-and-sum the link columns of the active features for one sample."""

    _check_sample(model, sample)
    fp.validate(model.n_features)
    u = np.zeros(model.latent_dim, dtype=np.float64)
    gather = model._gather
    for f in fp.active:
        u += gather[f, sample]
    return LatentVector(u)


def predict_one(model: ScreeningModel, fp: Fingerprint, protein: int) -> Prediction:
    _check_protein(model, protein)
    fp.validate(model.n_features)
    u = sample_latents(model, fp)
    y = sample_scores(model, u, [protein])
    mean, std = mean_std(y)
    return Prediction(fp.molecule_id, protein, float(mean[0]), float(std[0]))


def _screen_one(
    model: ScreeningModel,
    fp: Fingerprint,
    proteins: Sequence[int],
    counter: Optional[OpCounter],
) -> list[Prediction]:
    u = sample_latents(model, fp)
    y = sample_scores(model, u, proteins)
    mean, std = mean_std(y)
    if counter is not None:
        counter.latent_macs += model.n_samples * fp.nnz * model.latent_dim
        counter.predict_macs += model.n_samples * len(proteins) * model.latent_dim
    return [
        Prediction(fp.molecule_id, int(p), float(m), float(s))
        for p, m, s in zip(proteins, mean, std)
    ]


def screen(
    model: ScreeningModel,
    fps: Sequence[Fingerprint],
    proteins: Sequence[int],
    *,
    workers: int = 1,
    counter: Optional[OpCounter] = None,
) -> list[list[Prediction]]:
    """Predict every (molecule, protein) pair; row i belongs to ``fps[i]``.

    The latent vector of a molecule is computed once and reused for all
    requested proteins, so element (i, j) is identical to
    ``predict_one(model, fps[i], proteins[j])``.
    """

    proteins = [int(p) for p in proteins]
    for p in proteins:
        _check_protein(model, p)
    for fp in fps:
        fp.validate(model.n_features)
    if not fps:
        return []

    if workers <= 1 or counter is not None:
        return [_screen_one(model, fp, proteins, counter) for fp in fps]

    logger.debug(f"screening {len(fps)} molecules on {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda fp: _screen_one(model, fp, proteins, None), fps))


def generate_synthetic(
    seed: int,
    n_samples: int = DEFAULT_SAMPLES,
    latent_dim: int = DEFAULT_LATENT,
    n_features: int = DEFAULT_FEATURES,
    n_proteins: int = DEFAULT_PROTEINS,
    density: float = 1.0 / 16,
    *,
    n_molecules: int = 100,
) -> tuple[ScreeningModel, list[Fingerprint]]:
    """Seeded random model with N(0, 1/K) entries plus random fingerprints.

    Every fingerprint activates ``ceil(density * F)`` distinct features. Score
    spread grows like ``sqrt(density * F)``: at F=16 the default density
    activates a single feature, so small fixtures pass density 0.25 or more
    to keep scores O(1).
    """

    for name, value in (
        ("n_samples", n_samples),
        ("latent_dim", latent_dim),
        ("n_features", n_features),
        ("n_proteins", n_proteins),
    ):
        if value < 1:
            raise InputValidationError(f"{name} must be >= 1, got {value}")
    if n_molecules < 0:
        raise InputValidationError(f"n_molecules must be >= 0, got {n_molecules}")
    if not (0.0 < density <= 1.0):
        raise InputValidationError(f"density must lie in (0, 1], got {density}")

    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(latent_dim)
    link = rng.normal(0.0, scale, size=(n_samples, latent_dim, n_features))
    prot = rng.normal(0.0, scale, size=(n_samples, n_proteins, latent_dim))
    nnz = min(n_features, math.ceil(density * n_features))

    fps = []
    for i in range(n_molecules):
        active = np.sort(rng.choice(n_features, size=nnz, replace=False))
        fps.append(Fingerprint(f"mol-{i:05d}", tuple(int(f) for f in active)))
    logger.debug(
        f"synthetic model seed={seed} S={n_samples} K={latent_dim} F={n_features} "
        f"P={n_proteins} nnz={nnz} molecules={n_molecules}"
    )
    return ScreeningModel(link, prot), fps


def rmse(a: Sequence[float], b: Sequence[float]) -> float:
    a_arr = np.asarray(a, dtype=np.float64).ravel()
    b_arr = np.asarray(b, dtype=np.float64).ravel()
    if a_arr.shape != b_arr.shape:
        raise InputValidationError(f"rmse length mismatch: {a_arr.size} vs {b_arr.size}")
    if a_arr.size == 0:
        raise InputValidationError("rmse of empty input")
    diff = a_arr - b_arr
    return math.sqrt(math.fsum(diff * diff) / diff.size)


__all__ = [
    "DEFAULT_FEATURES",
    "DEFAULT_LATENT",
    "DEFAULT_PROTEINS",
    "DEFAULT_SAMPLES",
    "Fingerprint",
    "LatentVector",
    "OpCounter",
    "Prediction",
    "ScreeningModel",
    "compute_latent",
    "generate_synthetic",
    "predict_one",
    "rmse",
    "screen",
]
