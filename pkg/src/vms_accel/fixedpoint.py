"""Signed fixed-point (Q-format) arithmetic with explicit rounding and saturation.

Formats are written ``W<width>F<frac>``: W8F7 is an 8-bit signed value with 7
fraction bits, covering [-1, 127/128] in steps of 1/128. Quantization rounds
to nearest with ties to even and saturates at the format bounds. Products are
exact at full width; narrowing happens once, in :func:`fx_round_to`.

The ``*_array`` helpers are the vectorized forms used by the kernels and are
bit-identical to their scalar counterparts.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import AccumulatorOverflowError, FileFormatError, InputValidationError

MIN_WIDTH = 2
MAX_WIDTH = 64
MAX_STORAGE_WIDTH = 32
DEFAULT_ACCUMULATOR_BITS = 64

_FORMAT_PATTERN = re.compile(r"^W(\d+)F(\d+)$")

# int64 headroom kept when choosing a numpy container for exact sums.
_INT64_SAFE_BITS = 62


@dataclass(frozen=True, order=True)
class FixedFormat:
    """Signed Q-format descriptor: ``width`` total bits, ``frac`` fraction bits.

    Stored tensors use widths 2..32 (``MAX_STORAGE_WIDTH``, enforced where
    values are quantized and where plans pick formats). Widths up to 64 exist
    only for exact products such as :func:`fx_mul` results.
    """

    width: int
    frac: int
    signed: bool = True

    def __post_init__(self) -> None:
        if not self.signed:
            raise InputValidationError("only signed fixed-point formats are supported")
        if not MIN_WIDTH <= self.width <= MAX_WIDTH:
            raise InputValidationError(f"width must be in [{MIN_WIDTH}, {MAX_WIDTH}], got {self.width}")
        if not 0 <= self.frac <= self.width - 1:
            raise InputValidationError(f"frac must be in [0, {self.width - 1}], got {self.frac}")

    @property
    def raw_min(self) -> int:
        return -(1 << (self.width - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.width - 1)) - 1

    @property
    def int_bits(self) -> int:
        return self.width - 1 - self.frac

    @property
    def resolution(self) -> float:
        return math.ldexp(1.0, -self.frac)

    @property
    def real_min(self) -> float:
        return math.ldexp(self.raw_min, -self.frac)

    @property
    def real_max(self) -> float:
        return math.ldexp(self.raw_max, -self.frac)

    def contains_raw(self, raw: int) -> bool:
        return self.raw_min <= raw <= self.raw_max

    def __str__(self) -> str:
        return f"W{self.width}F{self.frac}"


def parse_format(text: str) -> FixedFormat:
    """Parse exactly the ``W<width>F<frac>`` grammar."""

    match = _FORMAT_PATTERN.match(text.strip()) if isinstance(text, str) else None
    if match is None:
        raise FileFormatError(None, f"invalid fixed-point format {text!r}; expected W<width>F<frac>")
    return FixedFormat(int(match.group(1)), int(match.group(2)))


@dataclass(frozen=True)
class FixedValue:
    raw: int
    fmt: FixedFormat

    def __post_init__(self) -> None:
        if not self.fmt.contains_raw(self.raw):
            raise InputValidationError(f"raw value {self.raw} outside {self.fmt} range")

    @property
    def value(self) -> float:
        return dequantize(self)


def _saturate(raw: int, fmt: FixedFormat) -> int:
    return max(fmt.raw_min, min(fmt.raw_max, raw))


def quantize_value(x: float, fmt: FixedFormat) -> FixedValue:
    """Round ``x`` to the nearest ``fmt`` grid point (ties to even), saturating."""

    x = float(x)
    if math.isnan(x):
        raise InputValidationError("cannot quantize NaN")
    if math.isinf(x):
        return FixedValue(fmt.raw_max if x > 0 else fmt.raw_min, fmt)
    scaled = math.ldexp(x, fmt.frac)
    if math.isinf(scaled):
        return FixedValue(fmt.raw_max if scaled > 0 else fmt.raw_min, fmt)
    # round() on a float is round-half-even and exact.
    return FixedValue(_saturate(round(scaled), fmt), fmt)


def dequantize(v: FixedValue) -> float:
    # int -> float is correctly rounded and ldexp is exact, so the result is
    # the nearest double to raw * 2**-frac.
    return math.ldexp(float(v.raw), -v.fmt.frac)


def fx_mul(a: FixedValue, b: FixedValue) -> FixedValue:
    """Exact full-width product in format W(a+b)F(a+b)."""

    fmt = FixedFormat(a.fmt.width + b.fmt.width, a.fmt.frac + b.fmt.frac)
    return FixedValue(a.raw * b.raw, fmt)


def required_accumulator_bits(term_width: int, shift: int, n_terms: int) -> int:
    """Signed bits needed to sum ``n_terms`` values of ``term_width`` bits shifted left by ``shift``."""

    growth = math.ceil(math.log2(n_terms)) if n_terms > 1 else 0
    return term_width + max(0, shift) + growth


@dataclass(frozen=True)
class Accumulator:
    """Exact wide accumulator; ``bits`` is the declared signed width."""

    frac: int
    raw: int = 0
    bits: int = DEFAULT_ACCUMULATOR_BITS
    context: str = "accumulator"

    def __post_init__(self) -> None:
        if self.frac < 0:
            raise InputValidationError(f"accumulator frac must be >= 0, got {self.frac}")
        if self.bits < 48:
            raise InputValidationError(f"accumulator needs >= 48 usable bits, got {self.bits}")

    @property
    def lo(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def hi(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @classmethod
    def for_workload(
        cls,
        frac: int,
        term_fmt: FixedFormat,
        n_terms: int,
        *,
        bits: int = DEFAULT_ACCUMULATOR_BITS,
        context: str = "accumulator",
    ) -> "Accumulator":
        """Declare the workload bound up front; reject contexts that could overflow."""

        need = required_accumulator_bits(term_fmt.width, frac - term_fmt.frac, n_terms)
        if need > bits:
            raise AccumulatorOverflowError(
                context, f"{n_terms} terms of {term_fmt} need {need} bits, accumulator has {bits}"
            )
        return cls(frac=frac, bits=bits, context=context)

    @property
    def value(self) -> float:
        return float(self.raw) / (1 << self.frac)


def fx_accumulate(acc: Accumulator, term: FixedValue) -> Accumulator:
    """Align ``term`` to the accumulator fraction and add it exactly."""

    shift = acc.frac - term.fmt.frac
    if shift < 0:
        raise InputValidationError(
            f"{acc.context}: term {term.fmt} has more fraction bits than accumulator frac {acc.frac}"
        )
    raw = acc.raw + (term.raw << shift)
    if not acc.lo <= raw <= acc.hi:
        raise AccumulatorOverflowError(acc.context, f"sum {raw} exceeds {acc.bits}-bit range")
    return Accumulator(frac=acc.frac, raw=raw, bits=acc.bits, context=acc.context)


def _round_shift(raw: int, shift: int) -> int:
    if shift <= 0:
        return raw << -shift
    q = raw >> shift
    r = raw - (q << shift)
    half = 1 << (shift - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


def fx_round_to(acc: Accumulator, fmt: FixedFormat) -> FixedValue:
    """Narrow to ``fmt``: round to nearest even on the dropped bits, then saturate."""

    return FixedValue(_saturate(_round_shift(acc.raw, acc.frac - fmt.frac), fmt), fmt)


# --- vectorized forms -------------------------------------------------------

IntArray = np.ndarray


def container_dtype(bits: int) -> Union[type, np.dtype]:
    """int64 when ``bits`` fits with headroom, else Python-int object arrays."""

    return np.int64 if bits <= _INT64_SAFE_BITS else object


def quantize_array(values: np.ndarray, fmt: FixedFormat) -> IntArray:
    """Elementwise :func:`quantize_value` returning raw integers."""

    if fmt.width > MAX_STORAGE_WIDTH:
        raise InputValidationError(f"{fmt} is not a storage format (max width {MAX_STORAGE_WIDTH})")
    values = np.asarray(values, dtype=np.float64)
    if np.isnan(values).any():
        raise InputValidationError("cannot quantize NaN")
    with np.errstate(over="ignore"):
        scaled = np.ldexp(values, fmt.frac)
    # np.rint rounds half to even, like round().
    return np.clip(np.rint(scaled), fmt.raw_min, fmt.raw_max).astype(np.int64)


def dequantize_array(raw: IntArray, fmt: FixedFormat) -> np.ndarray:
    return np.ldexp(np.asarray(raw, dtype=np.float64), -fmt.frac)


def round_shift_array(raw: IntArray, shift: int) -> IntArray:
    """Drop ``shift`` fraction bits with round-half-even (negative shift widens)."""

    if shift <= 0:
        return raw << (-shift)
    q = raw >> shift
    r = raw - (q << shift)
    half = 1 << (shift - 1)
    up = np.asarray((r > half) | ((r == half) & ((q & 1) == 1)), dtype=bool)
    return np.where(up, q + 1, q)


def saturate_array(raw: IntArray, fmt: FixedFormat) -> IntArray:
    return np.minimum(np.maximum(raw, fmt.raw_min), fmt.raw_max)


def narrow_array(acc: IntArray, acc_frac: int, fmt: FixedFormat) -> IntArray:
    """Vectorized :func:`fx_round_to`."""

    return saturate_array(round_shift_array(acc, acc_frac - fmt.frac), fmt)


__all__ = [
    "Accumulator",
    "FixedFormat",
    "FixedValue",
    "MAX_STORAGE_WIDTH",
    "container_dtype",
    "dequantize",
    "dequantize_array",
    "fx_accumulate",
    "fx_mul",
    "fx_round_to",
    "narrow_array",
    "parse_format",
    "quantize_array",
    "quantize_value",
    "required_accumulator_bits",
    "round_shift_array",
    "saturate_array",
]
