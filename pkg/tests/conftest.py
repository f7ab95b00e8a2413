import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure src/ is on sys.path for `import vms_accel`
ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
for p in (ROOT, SRC):
    s = str(p)
    if s not in sys.path:
        sys.path.insert(0, s)

from vms_accel.model import ScreeningModel, generate_synthetic  # noqa: E402
from vms_accel.quantize import (  # noqa: E402
    TENSOR_ORDER,
    QuantizationPlan,
    profile_ranges,
    quantize_model,
    select_format,
)


def uniform_plan(model, calib, width):
    """Every tensor at ``width`` bits, formats sized from the calibration ranges."""

    stats = {s.tensor_id: s for s in profile_ranges(model, calib)}
    return QuantizationPlan({t: select_format(stats[t], width) for t in TENSOR_ORDER})


@pytest.fixture()
def small_synthetic():
    """(model, fingerprints) at S=4 K=6 F=40 P=5 with 12 molecules."""

    return generate_synthetic(3, 4, 6, 40, 5, 0.25, n_molecules=12)


@pytest.fixture()
def small_quantized(small_synthetic):
    model, fps = small_synthetic
    return quantize_model(model, uniform_plan(model, fps, 16)), fps


@pytest.fixture()
def grid_model():
    """Every weight, latent and score is on the W8F7 grid and sample means are exact."""

    link = np.array([[[0.25, 0.5]], [[-0.25, 0.25]]])
    prot = np.array([[[0.5], [-0.5]], [[0.25], [0.5]]])
    return ScreeningModel(link, prot)
