"""Cycle-level model of the streaming kernel: stages joined by bounded FIFOs.

A stage fires when it is past its initiation interval and its input FIFO holds
``consume`` tokens. Fired batches travel through the stage's own pipeline
registers and complete ``latency`` cycles later; only then do they need
``produce`` free slots in the output FIFO. A completed batch that cannot be
emitted stalls the stage: it does not fire again until that batch leaves.

Each cycle first emits completed batches (in firing order, where room allows),
then evaluates stages downstream-first. An emitted token can be consumed in
the cycle it is emitted; a slot freed by a consumer is available to the
producer from the next cycle on.

The first stage reads from an unbounded source and the last stage writes into
an unbounded sink. ``total_cycles`` is the cycle in which the last token
reaches the sink.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import DeadlockError, InputValidationError
from .kernel import BlockConfig, FixedPointPipeline, KernelOutput, check_fingerprints
from .model import Fingerprint, Prediction
from .quantize import QuantizedModel

logger = logging.getLogger(__name__)

STAGE_NAMES: tuple[str, ...] = ("FETCH", "LATENT", "PREDICT", "AGGREGATE", "EMIT")
DEFAULT_STAGE_LATENCY: dict[str, int] = {"FETCH": 2, "LATENT": 8, "PREDICT": 8, "AGGREGATE": 4, "EMIT": 2}
DEFAULT_FIFO_DEPTH = 2


@dataclass(frozen=True)
class StageSpec:
    name: str
    latency: int = 1
    initiation_interval: int = 1
    consume: int = 1
    produce: int = 1

    def __post_init__(self) -> None:
        for attr in ("latency", "initiation_interval", "consume", "produce"):
            value = getattr(self, attr)
            if not isinstance(value, int) or value < 1:
                raise InputValidationError(f"stage {self.name}: {attr} must be an integer >= 1, got {value!r}")

    @property
    def token_preserving(self) -> bool:
        return self.consume == self.produce

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "latency": self.latency,
            "ii": self.initiation_interval,
            "consume": self.consume,
            "produce": self.produce,
        }


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple[StageSpec, ...]
    fifo_depths: tuple[int, ...]

    def __post_init__(self) -> None:
        stages = tuple(self.stages)
        depths = tuple(int(d) for d in self.fifo_depths)
        if not stages:
            raise InputValidationError("pipeline needs at least one stage")
        if len(depths) != len(stages) - 1:
            raise InputValidationError(
                f"pipeline with {len(stages)} stages needs {len(stages) - 1} FIFO depths, got {len(depths)}"
            )
        for i, d in enumerate(depths):
            if d < 1:
                raise InputValidationError(f"FIFO depth between {stages[i].name} and {stages[i + 1].name} must be >= 1")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "fifo_depths", depths)

    @classmethod
    def default(cls, *, fifo_depth: int = DEFAULT_FIFO_DEPTH) -> "PipelineSpec":
        stages = tuple(StageSpec(name, DEFAULT_STAGE_LATENCY[name]) for name in STAGE_NAMES)
        return cls(stages, (fifo_depth,) * (len(stages) - 1))

    @classmethod
    def chain(cls, stages: Sequence[StageSpec], depth: int) -> "PipelineSpec":
        return cls(tuple(stages), (depth,) * (len(stages) - 1))

    def require_kernel_stages(self) -> None:
        """The numeric kernel runs only on the FETCH -> LATENT -> PREDICT -> AGGREGATE -> EMIT chain."""

        names = tuple(s.name for s in self.stages)
        if names != STAGE_NAMES:
            raise InputValidationError(f"kernel pipeline must be {' -> '.join(STAGE_NAMES)}, got {' -> '.join(names)}")

    def link_names(self) -> list[str]:
        return [f"{a.name}->{b.name}" for a, b in zip(self.stages, self.stages[1:])]

    def to_dict(self) -> dict[str, Any]:
        return {"stages": [s.to_dict() for s in self.stages], "fifo_depths": list(self.fifo_depths)}


@dataclass(frozen=True)
class StageStats:
    name: str
    fires: int
    busy: int
    stalled: int
    starved: int


@dataclass(frozen=True)
class LinkStats:
    name: str
    depth: int
    max_occupancy: int


@dataclass(frozen=True)
class SimReport:
    total_cycles: int
    n_items: int
    stages: tuple[StageStats, ...]
    links: tuple[LinkStats, ...]

    def stage(self, name: str) -> StageStats:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_cycles": self.total_cycles,
            "n_items": self.n_items,
            "stages": [
                {"name": s.name, "fires": s.fires, "busy": s.busy, "stalled": s.stalled, "starved": s.starved}
                for s in self.stages
            ],
            "links": [{"name": ln.name, "depth": ln.depth, "max_occupancy": ln.max_occupancy} for ln in self.links],
        }


@dataclass
class _Link:
    name: str
    depth: Optional[int]
    visible: deque = field(default_factory=deque)
    max_occupancy: int = 0

    def room(self) -> Optional[int]:
        if self.depth is None:
            return None
        return self.depth - len(self.visible)

    def push(self, tokens: list) -> None:
        self.visible.extend(tokens)
        self.max_occupancy = max(self.max_occupancy, len(self.visible))


# A stage transform maps the consumed tokens onto the produced ones.
Transform = Callable[[int, list], list]


def _passthrough(stages: Sequence[StageSpec]) -> Transform:
    def run(index: int, tokens: list) -> list:
        spec = stages[index]
        if spec.token_preserving:
            return tokens
        return [None] * spec.produce

    return run


def _simulate(pipe: PipelineSpec, source: Sequence[Any], transform: Transform) -> tuple[SimReport, list]:
    stages = pipe.stages
    n = len(stages)
    links = [_Link(f"source->{stages[0].name}", None, deque(source))]
    for name, depth in zip(pipe.link_names(), pipe.fifo_depths):
        links.append(_Link(name, depth))
    links.append(_Link(f"{stages[-1].name}->sink", None))
    # Pipeline registers per stage: (completion cycle, produced tokens), in firing order.
    regs: list[deque] = [deque() for _ in stages]

    next_free = [0] * n
    fires = [0] * n
    busy = [0] * n
    stalled = [0] * n
    starved = [0] * n
    last_delivery = 0
    t = 0

    def drained_stages() -> list[bool]:
        # Drained: nothing upstream, nothing queued at the input, nothing in the registers.
        done = [False] * n
        for s in range(n):
            upstream = s == 0 or done[s - 1]
            done[s] = upstream and not links[s].visible and not regs[s]
        return done

    def input_exhausted(s: int, done: list[bool]) -> bool:
        return s == 0 or done[s - 1]

    def blocked(s: int) -> bool:
        return bool(regs[s]) and regs[s][0][0] <= t

    while True:
        emitted = False
        for s in range(n):
            dst = links[s + 1]
            while regs[s] and regs[s][0][0] <= t:
                room = dst.room()
                if room is not None and room < len(regs[s][0][1]):
                    break
                dst.push(regs[s].popleft()[1])
                emitted = True
                if s == n - 1:
                    last_delivery = t

        done = drained_stages()
        if all(done):
            break

        fired = False
        for s in reversed(range(n)):
            spec = stages[s]
            if next_free[s] > t or blocked(s):
                continue
            src = links[s]
            take = spec.consume
            if len(src.visible) < take:
                # A token-preserving stage flushes a short final batch.
                if not (src.visible and spec.token_preserving and input_exhausted(s, done)):
                    continue
                take = len(src.visible)
            give = take if spec.token_preserving else spec.produce
            tokens = [src.visible.popleft() for _ in range(take)]
            out = transform(s, tokens)
            if len(out) != give:
                raise InputValidationError(f"stage {spec.name} produced {len(out)} tokens, expected {give}")
            regs[s].append((t + spec.latency, out))
            next_free[s] = t + spec.initiation_interval
            fires[s] += 1
            fired = True

        if fired or emitted:
            t_next = t + 1
        else:
            dues = [r[0][0] for r in regs if r and r[0][0] > t]
            windows = [nf for nf in next_free if nf > t]
            if not dues and not windows:
                _raise_deadlock(pipe, links, regs, t)
            t_next = min(dues + windows)

        # Nothing changes between events, so each status holds for [t, t_next).
        span = t_next - t
        done = drained_stages()
        for s in range(n):
            if next_free[s] > t:
                busy[s] += span
            elif blocked(s):
                stalled[s] += span
            elif input_exhausted(s, done) and not links[s].visible:
                continue
            else:
                starved[s] += span
        t = t_next

    report = SimReport(
        total_cycles=last_delivery,
        n_items=len(source),
        stages=tuple(
            StageStats(spec.name, fires[s], busy[s], stalled[s], starved[s]) for s, spec in enumerate(stages)
        ),
        links=tuple(LinkStats(ln.name, ln.depth, ln.max_occupancy) for ln in links[1:-1]),
    )
    return report, list(links[-1].visible)


def _raise_deadlock(pipe: PipelineSpec, links: list[_Link], regs: list[deque], t: int) -> None:
    # The most downstream stage still holding tokens is the blocked one.
    for s in reversed(range(len(pipe.stages))):
        spec = pipe.stages[s]
        src, dst = links[s], links[s + 1]
        if regs[s]:
            raise DeadlockError(
                dst.name, t, f"{spec.name} holds {len(regs[s][0][1])} finished tokens, FIFO depth is {dst.depth}"
            )
        if src.visible:
            raise DeadlockError(
                src.name, t, f"{spec.name} needs {spec.consume} tokens, {len(src.visible)} are stranded"
            )
    raise DeadlockError(links[0].name, t, "no stage can fire")


def sim_pipeline(pipe: PipelineSpec, n_items: int) -> SimReport:
    """Timing-only simulation of ``n_items`` tokens through ``pipe``."""

    if n_items < 0:
        raise InputValidationError(f"n_items must be >= 0, got {n_items}")
    report, _ = _simulate(pipe, [None] * n_items, _passthrough(pipe.stages))
    logger.debug(f"simulated {n_items} items in {report.total_cycles} cycles")
    return report


def run_dataflow_raw(
    qm: QuantizedModel,
    fps: Sequence[Fingerprint],
    pipe: PipelineSpec,
    cfg: BlockConfig,
    proteins: Optional[Sequence[int]] = None,
) -> tuple[KernelOutput, SimReport]:
    """Stream molecules through the five kernel stages; numerics match run_blocked_raw."""

    pipe.require_kernel_stages()
    for spec in pipe.stages:
        if not spec.token_preserving:
            raise InputValidationError(f"stage {spec.name}: kernel stages need consume == produce")
    s_dim, k_dim, _, _ = qm.dims
    numerics = FixedPointPipeline(qm, proteins, cfg)
    cfg.validate_for(len(fps), len(numerics.proteins), s_dim, k_dim)
    check_fingerprints(qm, fps)

    def fetch(tokens: list) -> list:
        return tokens

    def latent(tokens: list) -> list:
        u = numerics.latent([fp for _, fp in tokens])
        return [(i, u[j]) for j, (i, _) in enumerate(tokens)]

    def predict(tokens: list) -> list:
        y = numerics.predict(np.stack([u for _, u in tokens]))
        return [(i, y[j]) for j, (i, _) in enumerate(tokens)]

    def aggregate(tokens: list) -> list:
        y = np.stack([row for _, row in tokens])
        mean, std = numerics.aggregate(y)
        return [(i, y[j], mean[j], std[j]) for j, (i, _) in enumerate(tokens)]

    def emit(tokens: list) -> list:
        return tokens

    handlers = (fetch, latent, predict, aggregate, emit)
    report, results = _simulate(pipe, list(enumerate(fps)), lambda s, tokens: handlers[s](tokens))

    pn = len(numerics.proteins)
    results.sort(key=lambda r: r[0])
    if results:
        y = np.stack([r[1] for r in results])
        mean = np.stack([r[2] for r in results])
        std = np.stack([r[3] for r in results])
    else:
        y = np.zeros((0, s_dim, pn), dtype=np.int64)
        mean = np.zeros((0, pn), dtype=np.int64)
        std = np.zeros((0, pn), dtype=np.int64)
    logger.info(f"dataflow run: {len(fps)} molecules in {report.total_cycles} cycles")
    out = KernelOutput(tuple(fp.molecule_id for fp in fps), numerics.proteins, y, mean, std, numerics.out_fmt)
    return out, report


def run_dataflow(
    qm: QuantizedModel,
    fps: Sequence[Fingerprint],
    pipe: PipelineSpec,
    cfg: BlockConfig,
    proteins: Optional[Sequence[int]] = None,
) -> tuple[list[Prediction], SimReport]:
    out, report = run_dataflow_raw(qm, fps, pipe, cfg, proteins)
    return out.to_predictions(), report


__all__ = [
    "DEFAULT_FIFO_DEPTH",
    "DEFAULT_STAGE_LATENCY",
    "LinkStats",
    "PipelineSpec",
    "STAGE_NAMES",
    "SimReport",
    "StageSpec",
    "StageStats",
    "run_dataflow",
    "run_dataflow_raw",
    "sim_pipeline",
]
