from __future__ import annotations

import math

import numpy as np
import pytest

from vms_accel.errors import AccumulatorOverflowError, FileFormatError, InputValidationError
from vms_accel.fixedpoint import (
    Accumulator,
    FixedFormat,
    FixedValue,
    container_dtype,
    dequantize,
    dequantize_array,
    fx_accumulate,
    fx_mul,
    fx_round_to,
    narrow_array,
    parse_format,
    quantize_array,
    quantize_value,
    required_accumulator_bits,
)

Q8_7 = FixedFormat(8, 7)


def test_format_bounds_and_text() -> None:
    assert Q8_7.raw_min == -128
    assert Q8_7.raw_max == 127
    assert Q8_7.real_max == 127 / 128
    assert Q8_7.real_min == -1.0
    assert Q8_7.resolution == 1 / 128
    assert str(Q8_7) == "W8F7"
    assert parse_format("W16F12") == FixedFormat(16, 12)


@pytest.mark.parametrize("text", ["W8", "8F7", "W8F8", "w8f7", "W1F0", "W65F3", ""])
def test_parse_format_rejects(text: str) -> None:
    with pytest.raises(InputValidationError):
        parse_format(text)


def test_parse_format_grammar_error_is_file_format_error() -> None:
    with pytest.raises(FileFormatError):
        parse_format("Q1.7")


@pytest.mark.parametrize(("x", "raw"), [(0.5, 64), (200.0, 127), (-1.0, -128), (-5.0, -128), (1 / 256, 0)])
def test_quantize_examples(x: float, raw: int) -> None:
    assert quantize_value(x, Q8_7).raw == raw


def test_quantize_ties_to_even() -> None:
    fmt = FixedFormat(8, 0)
    assert [quantize_value(x, fmt).raw for x in (0.5, 1.5, 2.5, -0.5, -1.5)] == [0, 2, 2, 0, -2]


def test_quantize_special_values() -> None:
    assert quantize_value(math.inf, Q8_7).raw == 127
    assert quantize_value(-math.inf, Q8_7).raw == -128
    with pytest.raises(InputValidationError):
        quantize_value(math.nan, Q8_7)


def test_quantize_error_within_half_step() -> None:
    rng = np.random.default_rng(0)
    fmt = FixedFormat(12, 9)
    for x in rng.uniform(fmt.real_min, fmt.real_max, size=500):
        assert abs(dequantize(quantize_value(x, fmt)) - x) <= fmt.resolution / 2


def test_dequantize_is_exact() -> None:
    fmt = FixedFormat(32, 30)
    for raw in (fmt.raw_min, -1, 0, 1, fmt.raw_max):
        assert dequantize(FixedValue(raw, fmt)) == raw / 2**30


def test_fixed_value_range_checked() -> None:
    with pytest.raises(InputValidationError):
        FixedValue(128, Q8_7)


def test_fx_mul_example() -> None:
    fmt = FixedFormat(8, 2)
    product = fx_mul(FixedValue(3, fmt), FixedValue(5, fmt))
    assert product.raw == 15
    assert product.fmt == FixedFormat(16, 4)
    assert product.value == pytest.approx(0.75 * 1.25)


@pytest.mark.parametrize(("raw", "expected"), [(6, 2), (10, 2), (-6, -2), (-10, -2), (7, 2), (9, 2), (-7, -2)])
def test_fx_round_to_half_even(raw: int, expected: int) -> None:
    # frac 2 -> frac 0: 6/4=1.5 -> 2, 10/4=2.5 -> 2
    acc = Accumulator(frac=2, raw=raw)
    assert fx_round_to(acc, FixedFormat(8, 0)).raw == expected


def test_fx_round_to_saturates() -> None:
    acc = Accumulator(frac=7, raw=5 * 128)
    assert fx_round_to(acc, Q8_7).raw == 127
    assert fx_round_to(Accumulator(frac=7, raw=-5 * 128), Q8_7).raw == -128


def test_fx_accumulate_aligns_fractions() -> None:
    acc = Accumulator(frac=10)
    acc = fx_accumulate(acc, FixedValue(64, Q8_7))  # 0.5
    acc = fx_accumulate(acc, FixedValue(3, FixedFormat(8, 2)))  # 0.75
    assert acc.value == 1.25
    with pytest.raises(InputValidationError):
        fx_accumulate(Accumulator(frac=2), FixedValue(1, Q8_7))


def test_accumulator_overflow_is_detected() -> None:
    acc = Accumulator(frac=0, raw=(1 << 47) - 1, bits=48, context="latent")
    with pytest.raises(AccumulatorOverflowError) as info:
        fx_accumulate(acc, FixedValue(1, FixedFormat(8, 0)))
    assert info.value.context == "latent"


def test_accumulator_declares_workload_bound() -> None:
    assert required_accumulator_bits(16, 0, 1024) == 26
    assert required_accumulator_bits(16, 3, 1) == 19
    Accumulator.for_workload(15, FixedFormat(16, 15), 1024)
    with pytest.raises(AccumulatorOverflowError):
        Accumulator.for_workload(20, FixedFormat(32, 0), 1 << 20, bits=48)
    with pytest.raises(InputValidationError):
        Accumulator(frac=0, bits=32)


def test_container_dtype() -> None:
    assert container_dtype(40) is np.int64
    assert container_dtype(62) is np.int64
    assert container_dtype(63) is object


def test_quantize_array_matches_scalar() -> None:
    rng = np.random.default_rng(3)
    fmt = FixedFormat(10, 6)
    values = np.concatenate([rng.normal(0.0, 4.0, size=300), [0.5 / 64, 1.5 / 64, -2.5 / 64, 100.0, -100.0]])
    raws = quantize_array(values, fmt)
    assert raws.dtype == np.int64
    assert raws.tolist() == [quantize_value(v, fmt).raw for v in values]
    assert dequantize_array(raws, fmt).tolist() == [dequantize(FixedValue(int(r), fmt)) for r in raws]


def test_quantize_array_rejects_wide_formats() -> None:
    with pytest.raises(InputValidationError):
        quantize_array(np.zeros(3), FixedFormat(40, 8))


@pytest.mark.parametrize("dtype", [np.int64, object])
def test_narrow_array_matches_scalar(dtype) -> None:
    rng = np.random.default_rng(5)
    raws = [int(v) for v in rng.integers(-(1 << 20), 1 << 20, size=400)] + [6, 10, -6, -10, 2, -2]
    fmt = FixedFormat(12, 3)
    acc = np.array(raws, dtype=dtype)
    narrowed = narrow_array(acc, 5, fmt)
    expected = [fx_round_to(Accumulator(frac=5, raw=r), fmt).raw for r in raws]
    assert [int(v) for v in narrowed] == expected


@pytest.mark.slow
@pytest.mark.parametrize("fmt", [FixedFormat(8, 7), FixedFormat(8, 3), FixedFormat(12, 8), FixedFormat(16, 14), FixedFormat(24, 20), FixedFormat(32, 28)])
def test_round_trip_error_bound_sweep(fmt: FixedFormat) -> None:
    rng = np.random.default_rng(fmt.width * 100 + fmt.frac)
    x = rng.uniform(fmt.real_min, fmt.real_max, size=100_000)
    err = np.abs(dequantize_array(quantize_array(x, fmt), fmt) - x)
    assert err.max() <= fmt.resolution / 2


def test_finer_resolution_never_increases_error() -> None:
    rng = np.random.default_rng(9)
    x = rng.uniform(-1.0, 0.99, size=2000)
    coarse, fine = FixedFormat(16, 13), FixedFormat(16, 14)
    err_coarse = np.abs(dequantize_array(quantize_array(x, coarse), coarse) - x)
    err_fine = np.abs(dequantize_array(quantize_array(x, fine), fine) - x)
    assert (err_fine <= err_coarse).all()


def test_round_trip_example() -> None:
    fmt = FixedFormat(16, 14)
    assert abs(dequantize(quantize_value(0.3, fmt)) - 0.3) <= 2**-15
