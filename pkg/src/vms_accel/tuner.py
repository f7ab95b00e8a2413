"""Exhaustive kernel-dimension search over the analytical device model."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Iterator, Optional

from .errors import InfeasibleError, InputValidationError
from .perfmodel import (
    DeviceDescriptor,
    Estimate,
    KernelConfig,
    WidthSource,
    Workload,
    as_widths,
    estimate_resources,
    estimate_time,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchBounds:
    max_unroll: int = 64
    max_instances: Optional[int] = None
    max_compounds: Optional[int] = None
    overlap: bool = True

    def __post_init__(self) -> None:
        if self.max_unroll < 1:
            raise InputValidationError(f"max_unroll must be >= 1, got {self.max_unroll}")
        if self.max_instances is not None and self.max_instances < 1:
            raise InputValidationError(f"max_instances must be >= 1, got {self.max_instances}")
        if self.max_compounds is not None and self.max_compounds < 1:
            raise InputValidationError(f"max_compounds must be >= 1, got {self.max_compounds}")


def divisors_upto(n: int, bound: int) -> list[int]:
    return [d for d in range(1, min(n, bound) + 1) if n % d == 0]


def powers_of_two_upto(m: int) -> list[int]:
    out = [1]
    while out[-1] * 2 <= m:
        out.append(out[-1] * 2)
    return out


def candidate_configs(
    w: Workload, dev: DeviceDescriptor, widths: WidthSource, bounds: SearchBounds
) -> Iterator[KernelConfig]:
    """Every config in the search space, in lexicographic key order."""

    s, k, f, p = w.dims
    ow = as_widths(widths)
    compounds = powers_of_two_upto(min(w.n_molecules, bounds.max_compounds or w.n_molecules))
    max_instances = min(dev.n_regions, bounds.max_instances or dev.n_regions)
    for uk, us, up, uf, c, inst in itertools.product(
        divisors_upto(k, bounds.max_unroll),
        divisors_upto(s, bounds.max_unroll),
        divisors_upto(p, bounds.max_unroll),
        divisors_upto(f, bounds.max_unroll),
        compounds,
        range(1, max_instances + 1),
    ):
        yield KernelConfig(uk, us, up, uf, c, inst, 1, ow)


def autotune(
    w: Workload,
    dev: DeviceDescriptor,
    plan: WidthSource,
    search: Optional[SearchBounds] = None,
) -> tuple[KernelConfig, Estimate]:
    """Feasible config with the least estimated time.

    Ties go to fewer DSPs, then the lexicographically smallest config key. With
    nothing feasible, the error names the limiting factor of the config that
    overshoots its resources the least.
    """

    bounds = search or SearchBounds()
    best: Optional[tuple[tuple, KernelConfig, Estimate]] = None
    closest = None
    n_seen = 0
    # Estimates depend on the config only through (lanes, compounds, instances).
    cache: dict[tuple[int, int, int], Estimate] = {}
    for cfg in candidate_configs(w, dev, plan, bounds):
        n_seen += 1
        usage = estimate_resources(cfg, w.dims, dev)
        if not usage.feasible:
            if closest is None or usage.overshoot < closest.overshoot:
                closest = usage
            continue
        shape = (cfg.lanes, cfg.compounds_per_invocation, cfg.n_instances)
        est = cache.get(shape)
        if est is None:
            est = cache[shape] = estimate_time(cfg, w, dev, bounds.overlap)
        rank = (est.seconds_exact, usage.dsp_used, cfg.key())
        if best is None or rank < best[0]:
            best = (rank, cfg, est)

    if best is None:
        raise InfeasibleError(
            f"none of {n_seen} configs fits {dev.name} (closest needs {closest.dsp_used:g} DSPs, "
            f"{closest.onchip_bits_used} on-chip bits)",
            closest.limiting_factor,
        )
    _, cfg, est = best
    logger.info(
        f"autotune on {dev.name}: {n_seen} configs, best {cfg.key()} at {est.seconds:.6g} s "
        f"({est.limiting_factor.value}-bound)"
    )
    return cfg, est


__all__ = ["SearchBounds", "autotune", "candidate_configs", "divisors_upto", "powers_of_two_upto"]
