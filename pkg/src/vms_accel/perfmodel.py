"""Analytical device model for the screening kernel.

Covers peak performance, DSP and on-chip storage feasibility, time and energy
estimates with invocation overhead and optional compute/transfer overlap, the
comparison table metrics and the per-optimization-step speedup ledger.

Time is computed in exact rationals and converted to floats only for
reporting, so ratios between estimates (speedup factors) are exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Optional, Sequence, Union

import yaml

from .errors import FileFormatError, InfeasibleError, InputValidationError, LimitingFactor
from .kernel import BlockConfig
from .model import Fingerprint
from .quantize import QuantizationPlan, TensorId

if TYPE_CHECKING:
    from .tuner import SearchBounds

logger = logging.getLogger(__name__)

DEVICE_DIR = Path(__file__).parent / "devices"

# (max operand width, DSP blocks per MAC lane)
DEFAULT_DSP_PER_MAC: tuple[tuple[int, float], ...] = ((8, 0.5), (18, 1.0), (27, 2.0), (32, 4.0), (64, 10.0))

FINGERPRINT_INDEX_BYTES = 4
BASELINE_WIDTH = 64

# Published whole-design totals, carried as annotations on the ledger.
REFERENCE_TOTAL_SPEEDUP = 1351
REFERENCE_RESOURCE_GROWTH = 280

_GIGA = 10**9


class DeviceKind(str, Enum):
    CPU = "cpu"
    GPU = "gpu"
    FPGA = "fpga"


@dataclass(frozen=True)
class DeviceDescriptor:
    name: str
    mac_units: int
    clock_ghz: float
    dsp_total: float
    onchip_bits: int
    dram_bandwidth_gbs: float
    power_watts: float
    invocation_overhead_s: float
    flops_per_mac: int = 1
    n_regions: int = 1
    dsp_per_mac: tuple[tuple[int, float], ...] = DEFAULT_DSP_PER_MAC
    kind: DeviceKind = DeviceKind.FPGA
    peak_gflops: Optional[float] = None
    reported_achieved_gflops: Optional[float] = None
    reported_efficiency: Optional[float] = None
    float_mac_latency: int = 8

    def __post_init__(self) -> None:
        positive = {
            "mac_units": self.mac_units,
            "clock_ghz": self.clock_ghz,
            "dsp_total": self.dsp_total,
            "onchip_bits": self.onchip_bits,
            "dram_bandwidth_gbs": self.dram_bandwidth_gbs,
            "power_watts": self.power_watts,
            "invocation_overhead_s": self.invocation_overhead_s,
            "flops_per_mac": self.flops_per_mac,
            "n_regions": self.n_regions,
            "float_mac_latency": self.float_mac_latency,
        }
        for key, value in positive.items():
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise InputValidationError(f"device {self.name}: {key} must be > 0, got {value!r}")
        for key in ("peak_gflops", "reported_achieved_gflops", "reported_efficiency"):
            value = getattr(self, key)
            if value is not None and not value > 0:
                raise InputValidationError(f"device {self.name}: {key} must be > 0 when set, got {value!r}")
        table = tuple((int(w), float(c)) for w, c in self.dsp_per_mac)
        if not table:
            raise InputValidationError(f"device {self.name}: empty dsp_per_mac table")
        for (w0, c0), (w1, c1) in zip(table, table[1:]):
            if w1 <= w0 or c1 < c0:
                raise InputValidationError(f"device {self.name}: dsp_per_mac must be non-decreasing in width")
        if table[0][1] <= 0:
            raise InputValidationError(f"device {self.name}: dsp_per_mac costs must be > 0")
        object.__setattr__(self, "dsp_per_mac", table)
        object.__setattr__(self, "kind", DeviceKind(self.kind))

    def dsp_cost(self, width: int) -> float:
        for max_width, cost in self.dsp_per_mac:
            if width <= max_width:
                return cost
        raise InputValidationError(f"device {self.name}: no DSP cost for {width}-bit operands")

    @property
    def region_bandwidth_gbs(self) -> float:
        return self.dram_bandwidth_gbs / self.n_regions

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], source: Union[str, Path, None] = None) -> "DeviceDescriptor":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise FileFormatError(source, f"unknown device keys: {', '.join(unknown)}")
        try:
            values = dict(data)
            if "dsp_per_mac" in values:
                values["dsp_per_mac"] = tuple(
                    (int(w), float(c)) for w, c in sorted(dict(values["dsp_per_mac"]).items())
                )
            return cls(**values)
        except TypeError as exc:
            raise FileFormatError(source, f"invalid device descriptor: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "kind": self.kind.value,
            "mac_units": self.mac_units,
            "clock_ghz": self.clock_ghz,
            "flops_per_mac": self.flops_per_mac,
            "dsp_total": self.dsp_total,
            "dsp_per_mac": {w: c for w, c in self.dsp_per_mac},
            "onchip_bits": self.onchip_bits,
            "dram_bandwidth_gbs": self.dram_bandwidth_gbs,
            "n_regions": self.n_regions,
            "power_watts": self.power_watts,
            "invocation_overhead_s": self.invocation_overhead_s,
            "float_mac_latency": self.float_mac_latency,
        }
        for key in ("peak_gflops", "reported_achieved_gflops", "reported_efficiency"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


def bundled_devices() -> list[str]:
    return sorted(p.stem for p in DEVICE_DIR.glob("*.yaml"))


def load_device(name_or_path: Union[str, Path]) -> DeviceDescriptor:
    """Load a descriptor from a YAML path, or by bundled name (``paper-fpga``)."""

    path = Path(name_or_path)
    if not path.is_file():
        bundled = DEVICE_DIR / f"{name_or_path}.yaml"
        if not bundled.is_file():
            raise InputValidationError(
                f"unknown device {str(name_or_path)!r}; bundled devices: {', '.join(bundled_devices())}"
            )
        path = bundled
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise FileFormatError(path, f"invalid YAML: {exc}", line=mark.line + 1 if mark else None) from exc
    if not isinstance(data, dict):
        raise FileFormatError(path, "device descriptor must be a mapping")
    dev = DeviceDescriptor.from_dict(data, path)
    logger.debug(f"loaded device {dev.name} from {path}")
    return dev


@dataclass(frozen=True, order=True)
class OperandWidths:
    link: int
    prot: int
    latent: int
    output: int

    def __post_init__(self) -> None:
        for key in ("link", "prot", "latent", "output"):
            if not 1 <= getattr(self, key) <= 64:
                raise InputValidationError(f"operand width {key} must be in [1, 64], got {getattr(self, key)}")

    @classmethod
    def uniform(cls, width: int) -> "OperandWidths":
        return cls(width, width, width, width)

    @classmethod
    def from_plan(cls, plan: QuantizationPlan) -> "OperandWidths":
        return cls(
            plan[TensorId.LINK].width,
            plan[TensorId.PROT_LATENT].width,
            plan[TensorId.LATENT_INTERMEDIATE].width,
            plan[TensorId.OUTPUT].width,
        )

    @property
    def mac_width(self) -> int:
        """Widest operand entering a MAC lane."""

        return max(self.link, self.prot, self.latent)

    @property
    def output_bytes(self) -> int:
        return math.ceil(self.output / 8)


WidthSource = Union[QuantizationPlan, OperandWidths]


def as_widths(source: WidthSource) -> OperandWidths:
    return source if isinstance(source, OperandWidths) else OperandWidths.from_plan(source)


@dataclass(frozen=True)
class KernelConfig:
    unroll_latent: int = 1
    unroll_samples: int = 1
    unroll_proteins: int = 1
    unroll_features: int = 1
    compounds_per_invocation: int = 1
    n_instances: int = 1
    initiation_interval: int = 1
    widths: OperandWidths = field(default_factory=lambda: OperandWidths.uniform(16))
    # blocking of the kernel this config maps; carried into reports, not timed
    block: Optional[BlockConfig] = None

    def __post_init__(self) -> None:
        for key in (
            "unroll_latent",
            "unroll_samples",
            "unroll_proteins",
            "unroll_features",
            "compounds_per_invocation",
            "n_instances",
            "initiation_interval",
        ):
            value = getattr(self, key)
            if not isinstance(value, int) or value < 1:
                raise InputValidationError(f"{key} must be an integer >= 1, got {value!r}")

    @property
    def lanes_per_instance(self) -> int:
        return self.unroll_samples * self.unroll_latent * (self.unroll_features + self.unroll_proteins)

    @property
    def lanes(self) -> int:
        return self.n_instances * self.lanes_per_instance

    def key(self) -> tuple[int, ...]:
        """Lexicographic tie-break order."""

        return (
            self.unroll_latent,
            self.unroll_samples,
            self.unroll_proteins,
            self.unroll_features,
            self.compounds_per_invocation,
            self.n_instances,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "unroll_latent": self.unroll_latent,
            "unroll_samples": self.unroll_samples,
            "unroll_proteins": self.unroll_proteins,
            "unroll_features": self.unroll_features,
            "compounds_per_invocation": self.compounds_per_invocation,
            "n_instances": self.n_instances,
            "initiation_interval": self.initiation_interval,
            "widths": {
                "link": self.widths.link,
                "prot": self.widths.prot,
                "latent": self.widths.latent,
                "output": self.widths.output,
            },
            "block": None if self.block is None else self.block.to_dict(),
        }


@dataclass(frozen=True)
class Workload:
    n_molecules: int
    n_samples: int
    latent_dim: int
    n_features: int
    n_proteins: int
    mean_nnz: float

    def __post_init__(self) -> None:
        if self.n_molecules < 0:
            raise InputValidationError(f"n_molecules must be >= 0, got {self.n_molecules}")
        for key in ("n_samples", "latent_dim", "n_features", "n_proteins"):
            if getattr(self, key) < 1:
                raise InputValidationError(f"{key} must be >= 1, got {getattr(self, key)}")
        if not (math.isfinite(self.mean_nnz) and 0 <= self.mean_nnz <= self.n_features):
            raise InputValidationError(f"mean_nnz must lie in [0, {self.n_features}], got {self.mean_nnz}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(S, K, F, P)."""

        return self.n_samples, self.latent_dim, self.n_features, self.n_proteins

    @classmethod
    def from_fingerprints(
        cls, fps: Sequence[Fingerprint], dims: tuple[int, int, int, int]
    ) -> "Workload":
        s, k, f, p = dims
        nnz = math.fsum(fp.nnz for fp in fps) / len(fps) if fps else 0.0
        return cls(len(fps), s, k, f, p, nnz)

    def to_dict(self) -> dict[str, Any]:
        return {
            "molecules": self.n_molecules,
            "samples": self.n_samples,
            "latent": self.latent_dim,
            "features": self.n_features,
            "proteins": self.n_proteins,
            "mean_nnz": self.mean_nnz,
        }


@dataclass(frozen=True)
class ResourceUsage:
    dsp_used: float
    onchip_bits_used: int
    dsp_total: float
    onchip_bits_total: int

    @property
    def feasible(self) -> bool:
        return self.dsp_used <= self.dsp_total and self.onchip_bits_used <= self.onchip_bits_total

    @property
    def limiting_factor(self) -> Optional[LimitingFactor]:
        if self.dsp_used > self.dsp_total:
            return LimitingFactor.DSP
        if self.onchip_bits_used > self.onchip_bits_total:
            return LimitingFactor.ONCHIP_STORAGE
        return None

    @property
    def overshoot(self) -> float:
        """Largest usage/capacity ratio; > 1 means infeasible."""

        return max(self.dsp_used / self.dsp_total, self.onchip_bits_used / self.onchip_bits_total)

    @property
    def dsp_pct(self) -> float:
        return 100.0 * self.dsp_used / self.dsp_total


@dataclass(frozen=True)
class Estimate:
    macs_total: int
    cycles: float
    compute_seconds: float
    transfer_seconds: float
    overhead_seconds: float
    seconds: float
    achieved_gflops: float
    pct_peak: float
    energy_joules: float
    gflops_per_watt: float
    feasible: bool
    limiting_factor: LimitingFactor
    resources: ResourceUsage
    n_invocations: int
    seconds_exact: Fraction = field(repr=False, compare=False, default=Fraction(0))

    def to_dict(self) -> dict[str, Any]:
        return {
            "macs_total": self.macs_total,
            "cycles": self.cycles,
            "compute_seconds": self.compute_seconds,
            "transfer_seconds": self.transfer_seconds,
            "overhead_seconds": self.overhead_seconds,
            "seconds": self.seconds,
            "n_invocations": self.n_invocations,
            "achieved_gflops": self.achieved_gflops,
            "pct_peak": self.pct_peak,
            "energy_joules": self.energy_joules,
            "gflops_per_watt": self.gflops_per_watt,
            "feasible": self.feasible,
            "limiting_factor": self.limiting_factor.value,
            "dsp_used": self.resources.dsp_used,
            "dsp_pct": self.resources.dsp_pct,
            "onchip_bits_used": self.resources.onchip_bits_used,
        }


def peak_performance(dev: DeviceDescriptor) -> float:
    """GF/s: MACs issuable per cycle times clock, unless the descriptor pins it."""

    if dev.peak_gflops is not None:
        return float(dev.peak_gflops)
    return dev.mac_units * dev.clock_ghz * dev.flops_per_mac


def workload_macs(w: Workload, *, dense: bool = False) -> int:
    """M * S * (nnz * K + P * K); gather-adds count as MACs.

    ``dense`` counts every feature instead of the active ones.
    """

    nnz = Fraction(w.n_features) if dense else Fraction(w.mean_nnz)
    total = w.n_molecules * w.n_samples * w.latent_dim * (nnz + w.n_proteins)
    return round(total)


def estimate_resources(
    cfg: KernelConfig, dims: tuple[int, int, int, int], dev: DeviceDescriptor
) -> ResourceUsage:
    if cfg.n_instances > dev.n_regions:
        raise InputValidationError(
            f"{cfg.n_instances} instances exceed the {dev.n_regions} regions of {dev.name}"
        )
    s, k, f, p = dims
    widths = cfg.widths
    dsp = cfg.lanes * dev.dsp_cost(widths.mac_width)
    onchip = cfg.n_instances * (s * k * f * widths.link + s * p * k * widths.prot)
    return ResourceUsage(dsp, onchip, dev.dsp_total, dev.onchip_bits)


def pct_peak(achieved: float, peak: float) -> float:
    """Percent of peak; tables print it rounded to an integer."""

    if not peak > 0:
        raise InputValidationError(f"peak must be > 0, got {peak}")
    return 100.0 * achieved / peak


def energy_efficiency(achieved: float, power: float) -> float:
    """GF/s per watt."""

    if not power > 0:
        raise InputValidationError(f"power must be > 0, got {power}")
    return achieved / power


def estimate_time(cfg: KernelConfig, w: Workload, dev: DeviceDescriptor, overlap: bool = True) -> Estimate:
    usage = estimate_resources(cfg, w.dims, dev)
    if not usage.feasible:
        raise InfeasibleError(
            f"config {cfg.key()} needs {usage.dsp_used:g} DSPs and {usage.onchip_bits_used} on-chip bits "
            f"on {dev.name} ({dev.dsp_total:g} DSPs, {dev.onchip_bits} bits)",
            usage.limiting_factor,
        )

    macs = workload_macs(w)
    hz = Fraction(dev.clock_ghz) * _GIGA
    cycles = Fraction(macs, cfg.lanes) * cfg.initiation_interval
    compute = cycles / hz

    per_molecule = Fraction(w.mean_nnz) * FINGERPRINT_INDEX_BYTES + w.n_proteins * 2 * cfg.widths.output_bytes
    bandwidth = Fraction(dev.dram_bandwidth_gbs) / dev.n_regions * cfg.n_instances * _GIGA
    transfer = w.n_molecules * per_molecule / bandwidth

    n_invocations = -(-w.n_molecules // cfg.compounds_per_invocation)
    overhead = n_invocations * Fraction(dev.invocation_overhead_s)
    body = max(compute, transfer) if overlap else compute + transfer
    seconds = overhead + body

    achieved = float(macs * dev.flops_per_mac / seconds / _GIGA) if seconds > 0 else 0.0
    factor = LimitingFactor.BANDWIDTH if transfer > compute else LimitingFactor.COMPUTE
    energy = float(seconds * Fraction(dev.power_watts))
    return Estimate(
        macs_total=macs,
        cycles=float(cycles),
        compute_seconds=float(compute),
        transfer_seconds=float(transfer),
        overhead_seconds=float(overhead),
        seconds=float(seconds),
        achieved_gflops=achieved,
        pct_peak=pct_peak(achieved, peak_performance(dev)),
        energy_joules=energy,
        gflops_per_watt=energy_efficiency(achieved, dev.power_watts),
        feasible=True,
        limiting_factor=factor,
        resources=usage,
        n_invocations=n_invocations,
        seconds_exact=seconds,
    )


# --- comparison table --------------------------------------------------------


@dataclass(frozen=True)
class DeviceMetrics:
    """One column of the device comparison table."""

    name: str
    kind: DeviceKind
    peak_gflops: float
    achieved_gflops: float
    pct_peak: float
    power_watts: float
    gflops_per_watt: float
    peak_gflops_per_watt: float
    reported_efficiency: Optional[float]

    @property
    def pct_peak_rounded(self) -> int:
        return round(self.pct_peak)


def device_metrics(dev: DeviceDescriptor, achieved: Optional[float] = None) -> DeviceMetrics:
    achieved = dev.reported_achieved_gflops if achieved is None else achieved
    if achieved is None:
        raise InputValidationError(f"device {dev.name} has no achieved GF/s; pass one explicitly")
    peak = peak_performance(dev)
    return DeviceMetrics(
        name=dev.name,
        kind=dev.kind,
        peak_gflops=peak,
        achieved_gflops=float(achieved),
        pct_peak=pct_peak(achieved, peak),
        power_watts=dev.power_watts,
        gflops_per_watt=energy_efficiency(achieved, dev.power_watts),
        peak_gflops_per_watt=energy_efficiency(peak, dev.power_watts),
        reported_efficiency=dev.reported_efficiency,
    )


# --- optimization step ledger ------------------------------------------------

STEP_NAMES: tuple[str, ...] = (
    "baseline",
    "loop blocking",
    "bit-width reduction",
    "parallelism",
    "streaming overlap",
    "kernel dims and instances",
)

# Largest divisor of each dimension not above these caps.
PARALLELISM_PRESET = {"latent": 4, "samples": 2, "proteins": 4, "features": 4}


def largest_divisor_upto(n: int, cap: int) -> int:
    return max(d for d in range(1, min(n, cap) + 1) if n % d == 0)


@dataclass(frozen=True)
class LedgerStep:
    name: str
    config: KernelConfig
    overlap: bool
    estimate: Estimate
    factor: Fraction
    cumulative: Fraction
    pct_peak: float = 0.0


@dataclass(frozen=True)
class StepLedger:
    steps: tuple[LedgerStep, ...]
    reference_speedup: int = REFERENCE_TOTAL_SPEEDUP
    reference_resource_growth: int = REFERENCE_RESOURCE_GROWTH

    @property
    def total_factor(self) -> Fraction:
        return self.steps[-1].cumulative

    @property
    def resource_growth(self) -> float:
        first = self.steps[0].estimate.resources.dsp_used
        return self.steps[-1].estimate.resources.dsp_used / first


def step_ledger(
    w: Workload, dev: DeviceDescriptor, plan: WidthSource, search: Optional[SearchBounds] = None
) -> StepLedger:
    """Evaluate the six cumulative optimization steps and their speedup factors."""

    from .tuner import SearchBounds, autotune

    if w.n_molecules < 1:
        raise InputValidationError("the step ledger needs at least one molecule")
    s, k, f, p = w.dims
    baseline = KernelConfig(initiation_interval=dev.float_mac_latency, widths=OperandWidths.uniform(BASELINE_WIDTH))
    blocked = replace(baseline, initiation_interval=1)
    narrowed = replace(blocked, widths=as_widths(plan))
    parallel = replace(
        narrowed,
        unroll_latent=largest_divisor_upto(k, PARALLELISM_PRESET["latent"]),
        unroll_samples=largest_divisor_upto(s, PARALLELISM_PRESET["samples"]),
        unroll_proteins=largest_divisor_upto(p, PARALLELISM_PRESET["proteins"]),
        unroll_features=largest_divisor_upto(f, PARALLELISM_PRESET["features"]),
    )
    search = replace(search or SearchBounds(), overlap=True)
    tuned, _ = autotune(w, dev, narrowed.widths, search)

    configs = ((baseline, False), (blocked, False), (narrowed, False), (parallel, False), (parallel, True), (tuned, True))
    steps: list[LedgerStep] = []
    previous: Optional[Fraction] = None
    cumulative = Fraction(1)
    peak = peak_performance(dev)
    for name, (cfg, overlap) in zip(STEP_NAMES, configs):
        est = estimate_time(cfg, w, dev, overlap)
        factor = Fraction(1) if previous is None else previous / est.seconds_exact
        cumulative *= factor
        steps.append(LedgerStep(name, cfg, overlap, est, factor, cumulative, pct_peak(est.achieved_gflops, peak)))
        logger.debug(f"ledger step {name}: {est.seconds:.6g} s, x{float(factor):.3f}, {steps[-1].pct_peak:.2f}% of peak")
        previous = est.seconds_exact
    ledger = StepLedger(tuple(steps))
    logger.info(
        f"step ledger on {dev.name}: total x{float(ledger.total_factor):.1f}, "
        f"DSP growth x{ledger.resource_growth:.1f}"
    )
    return ledger


__all__ = [
    "BASELINE_WIDTH",
    "DEFAULT_DSP_PER_MAC",
    "DeviceDescriptor",
    "DeviceKind",
    "DeviceMetrics",
    "Estimate",
    "KernelConfig",
    "LedgerStep",
    "OperandWidths",
    "REFERENCE_RESOURCE_GROWTH",
    "REFERENCE_TOTAL_SPEEDUP",
    "ResourceUsage",
    "STEP_NAMES",
    "StepLedger",
    "Workload",
    "as_widths",
    "bundled_devices",
    "device_metrics",
    "energy_efficiency",
    "estimate_resources",
    "estimate_time",
    "largest_divisor_upto",
    "load_device",
    "pct_peak",
    "peak_performance",
    "step_ledger",
    "workload_macs",
]
