"""Run configuration: YAML documents merged over built-in defaults.

Lookup order (first existing file wins):

1. an explicit ``--config`` path, else the ``VMS_ACCEL_CONFIG`` environment variable
2. ``./.vms_accel/config.yaml`` (project)
3. ``~/.vms_accel/config.yaml`` (user home)
4. built-in defaults only
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .dataflow import PipelineSpec, StageSpec
from .errors import FileFormatError, InputValidationError
from .formats import load_yaml
from .kernel import BlockConfig
from .perfmodel import KernelConfig
from .quantize import DEFAULT_BUDGET, DEFAULT_WIDTHS
from .tuner import SearchBounds

logger = logging.getLogger(__name__)

CONFIG_ENV = "VMS_ACCEL_CONFIG"
CONFIG_DIR = ".vms_accel"
CONFIG_NAME = "config.yaml"

DEFAULTS: dict[str, Any] = {
    "seed": 1,
    "threads": 1,
    "dims": {"samples": 16, "latent": 32, "features": 1024, "proteins": 64},
    "density": 1.0 / 16,
    "n_molecules": 1000,
    "budget": DEFAULT_BUDGET,
    "widths": list(DEFAULT_WIDTHS),
    "block": {"molecules": 16, "proteins": 16, "samples": 4, "latent": 8},
    "pipeline": {
        "stages": [
            {"name": "FETCH", "latency": 2, "ii": 1, "consume": 1, "produce": 1},
            {"name": "LATENT", "latency": 8, "ii": 1, "consume": 1, "produce": 1},
            {"name": "PREDICT", "latency": 8, "ii": 1, "consume": 1, "produce": 1},
            {"name": "AGGREGATE", "latency": 4, "ii": 1, "consume": 1, "produce": 1},
            {"name": "EMIT", "latency": 2, "ii": 1, "consume": 1, "produce": 1},
        ],
        "fifo_depths": [2, 2, 2, 2],
    },
    "kernel": {
        "unroll_latent": 1,
        "unroll_samples": 1,
        "unroll_proteins": 1,
        "unroll_features": 1,
        "compounds_per_invocation": 1,
        "n_instances": 1,
        "initiation_interval": 1,
    },
    "device": "paper-fpga",
    "search": {"max_unroll": 64, "max_instances": None, "max_compounds": None, "overlap": True},
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    threads: int
    dims: tuple[int, int, int, int]  # (S, K, F, P)
    density: float
    n_molecules: int
    budget: float
    widths: tuple[int, ...]
    block: BlockConfig
    pipeline: PipelineSpec
    kernel: KernelConfig
    device: str
    search: SearchBounds
    source: Optional[Path] = None


def merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    """Key-by-key merge: nested mappings merge, everything else is replaced."""

    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def find_config_file(
    explicit: Union[str, Path, None] = None,
    *,
    cwd: Optional[Path] = None,
    home: Optional[Path] = None,
) -> Optional[Path]:
    if explicit is None:
        explicit = os.environ.get(CONFIG_ENV) or None
    if explicit is not None:
        path = Path(explicit)
        if not path.is_file():
            raise InputValidationError(f"config file {path} does not exist")
        return path
    cwd = cwd or Path.cwd()
    home = home or Path.home()
    for candidate in (cwd / CONFIG_DIR / CONFIG_NAME, home / CONFIG_DIR / CONFIG_NAME):
        if candidate.is_file():
            return candidate
    return None


def _build(doc: Mapping[str, Any], source: Optional[Path]) -> RunConfig:
    try:
        dims = doc["dims"]
        block = doc["block"]
        stages = tuple(
            StageSpec(
                str(st["name"]),
                int(st.get("latency", 1)),
                int(st.get("ii", 1)),
                int(st.get("consume", 1)),
                int(st.get("produce", 1)),
            )
            for st in doc["pipeline"]["stages"]
        )
        pipeline = PipelineSpec(stages, tuple(int(d) for d in doc["pipeline"]["fifo_depths"]))
        pipeline.require_kernel_stages()
        block_cfg = BlockConfig(int(block["molecules"]), int(block["proteins"]), int(block["samples"]), int(block["latent"]))
        search = doc["search"]
        max_instances = search.get("max_instances")
        max_compounds = search.get("max_compounds")
        cfg = RunConfig(
            seed=int(doc["seed"]),
            threads=int(doc["threads"]),
            dims=(int(dims["samples"]), int(dims["latent"]), int(dims["features"]), int(dims["proteins"])),
            density=float(doc["density"]),
            n_molecules=int(doc["n_molecules"]),
            budget=float(doc["budget"]),
            widths=tuple(int(w) for w in doc["widths"]),
            block=block_cfg,
            pipeline=pipeline,
            kernel=KernelConfig(**{k: int(v) for k, v in doc["kernel"].items()}, block=block_cfg),
            device=str(doc["device"]),
            search=SearchBounds(
                max_unroll=int(search.get("max_unroll", 64)),
                max_instances=None if max_instances is None else int(max_instances),
                max_compounds=None if max_compounds is None else int(max_compounds),
                overlap=bool(search.get("overlap", True)),
            ),
            source=source,
        )
    except InputValidationError as exc:
        if source is None:
            raise
        raise FileFormatError(source, str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(source, f"invalid configuration value: {exc!r}") from exc
    if cfg.threads < 1:
        raise FileFormatError(source, f"threads must be >= 1, got {cfg.threads}")
    return cfg


def load_run_config(
    explicit: Union[str, Path, None] = None,
    *,
    cwd: Optional[Path] = None,
    home: Optional[Path] = None,
) -> RunConfig:
    path = find_config_file(explicit, cwd=cwd, home=home)
    doc = dict(DEFAULTS)
    if path is not None:
        loaded = load_yaml(path) or {}
        if not isinstance(loaded, dict):
            raise FileFormatError(path, "configuration must be a mapping")
        for key in sorted(set(loaded) - set(DEFAULTS)):
            logger.warning(f"{path}: ignoring unknown configuration key {key!r}")
            loaded.pop(key)
        doc = merge(DEFAULTS, loaded)
        logger.info(f"using configuration {path}")
    return _build(doc, path)


__all__ = ["CONFIG_ENV", "DEFAULTS", "RunConfig", "find_config_file", "load_run_config", "merge"]
