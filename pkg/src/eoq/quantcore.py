"""Power-of-two fixed-point quantizers and the QTensor value representation.

Three quantizers are provided:

* ``basic_quant``  -- round to the grid ``n / 2**(k-1)``
* ``clamp_quant``  -- basic quantization clamped to ``[-1 + 2**(1-k), 1 - 2**(1-k)]``
* ``scale_quant``  -- extract a power-of-two scale ``2**s`` from ``max|x|``, then
  clamp-quantize ``x / 2**s``

All of them return a :class:`QTensor`, which keeps integer numerators and the
two exponents needed to recover the exact dyadic value.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, fields

import numpy as np

MIN_BITS = 2
MAX_BITS = 16
# numerators of basic-quantized tensors must fit a signed 32-bit accumulator
ACC_LIMIT = 2**31 - 1

# per-kind call counters, used by the harness to audit which quantizers ran
CALLS: Counter = Counter()


class QuantizationError(ValueError):
    pass


def check_bits(k: int) -> int:
    if isinstance(k, bool) or int(k) != k or not MIN_BITS <= k <= MAX_BITS:
        raise QuantizationError(f"bit width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {k!r}")
    return int(k)


@dataclass(frozen=True)
class BitWidthConfig:
    """Bit widths of every quantizer in the model (weights, activations, bias,
    layer scale, errors, gradients, updates)."""

    k_w: int = 8
    k_a: int = 8
    k_b: int = 8
    k_gamma: int = 8
    k_e: int = 8
    k_g: int = 8
    k_u: int = 8

    def __post_init__(self):
        for f in fields(self):
            check_bits(getattr(self, f.name))

    @classmethod
    def uniform(cls, k: int) -> "BitWidthConfig":
        return cls(*([k] * 7))

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True, eq=False)
class QTensor:
    """A tensor whose elements are exactly ``numerators * 2**(scale_exp - grid_exp)``."""

    numerators: np.ndarray
    grid_exp: int
    bit_width: int
    scale_exp: int = 0

    def __post_init__(self):
        check_bits(self.bit_width)
        num = np.asarray(self.numerators)
        if num.dtype.kind not in "iu":
            raise TypeError("QTensor numerators must be integers")
        num.setflags(write=False)
        object.__setattr__(self, "numerators", num)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.numerators.shape

    @property
    def exponent(self) -> int:
        """Net power of two multiplying the numerators."""
        return self.scale_exp - self.grid_exp

    @property
    def resolution(self) -> float:
        return math.ldexp(1.0, self.exponent)

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        return dequantize(self, dtype)

    def __repr__(self) -> str:
        return (f"QTensor(shape={self.shape}, k={self.bit_width}, "
                f"grid_exp={self.grid_exp}, scale_exp={self.scale_exp})")


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise QuantizationError("non-finite value entering quantizer")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # floor(|x| + 0.5) misrounds 0.49999999999999994; split off the exact fraction instead
    whole = np.trunc(x)
    frac = x - whole
    return whole + np.sign(x) * (np.abs(frac) >= 0.5)


def round_nearest(x):
    """Nearest integer, ties away from zero. Accepts scalars or arrays."""
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    out = _round_half_away(arr)
    if arr.ndim == 0:
        return int(out)
    return out.astype(np.int64)


def _numerators(x, k: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    n = _round_half_away(np.ldexp(arr, k - 1))
    if n.size and np.max(np.abs(n)) > ACC_LIMIT:
        raise QuantizationError(f"quantized numerator exceeds the 32-bit accumulator range (k={k})")
    return n.astype(np.int64)


def _narrow(n: np.ndarray) -> np.ndarray:
    if n.size == 0 or np.max(np.abs(n)) <= 2**15 - 1:
        return n.astype(np.int16)
    return n.astype(np.int32)


def basic_quant(x, k: int) -> QTensor:
    """Round ``x`` to the nearest multiple of ``2**(1-k)``; the range is unbounded."""
    k = check_bits(k)
    CALLS["basic"] += 1
    return QTensor(_narrow(_numerators(x, k)), grid_exp=k - 1, bit_width=k)


def _clamped_numerators(arr: np.ndarray, k: int) -> np.ndarray:
    _check_finite(arr)
    lim = 2 ** (k - 1) - 1
    # clipping to +-2 first lands on the same grid point and keeps huge inputs in range
    n = _round_half_away(np.ldexp(np.clip(arr, -2.0, 2.0), k - 1))
    return np.clip(n, -lim, lim).astype(np.int16)


def clamp_quant(x, k: int) -> QTensor:
    k = check_bits(k)
    CALLS["clamp"] += 1
    n = _clamped_numerators(np.asarray(x, dtype=np.float64), k)
    return QTensor(n, grid_exp=k - 1, bit_width=k)


def pow2_scale(x) -> int:
    """Exponent ``s`` of the power-of-two scale: ``round(log2(max|x|))``.

    Returns 0 for an all-zero (or empty) tensor.
    """
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    if arr.size == 0:
        return 0
    m = float(np.max(np.abs(arr)))
    if m == 0.0:
        return 0
    # m = f * 2**e with f in [0.5, 1); round(log2 m) is e when f >= 1/sqrt(2), else e - 1.
    # Decide f >= 1/sqrt(2) exactly via the integer mantissa: 2 * M**2 >= 2**106.
    f, e = math.frexp(m)
    mant = int(math.ldexp(f, 53))
    return e if 2 * mant * mant >= 2**106 else e - 1


def scale_quant(x, k: int) -> QTensor:
    """Clamp-quantize ``x / 2**s`` where ``2**s`` approximates ``max|x|``."""
    k = check_bits(k)
    CALLS["scale"] += 1
    arr = np.asarray(x, dtype=np.float64)
    s = pow2_scale(arr)
    n = _clamped_numerators(np.ldexp(arr, -s), k)
    return QTensor(n, grid_exp=k - 1, bit_width=k, scale_exp=s)


def on_grid(values, grid_exp: int, bit_width: int, scale_exp: int = 0) -> QTensor:
    """Wrap values already lying on a dyadic grid; raises if any element is off-grid."""
    arr = np.asarray(values, dtype=np.float64)
    _check_finite(arr)
    n = np.ldexp(arr, grid_exp - scale_exp)
    if not np.array_equal(n, np.trunc(n)):
        raise QuantizationError(f"values are not on the 2**-{grid_exp - scale_exp} grid")
    if n.size and np.max(np.abs(n)) > ACC_LIMIT:
        raise QuantizationError("grid numerator exceeds the 32-bit accumulator range")
    return QTensor(_narrow(n.astype(np.int64)), grid_exp=grid_exp, bit_width=bit_width, scale_exp=scale_exp)


def dequantize(q: QTensor, dtype=np.float64) -> np.ndarray:
    return np.ldexp(q.numerators.astype(dtype), q.exponent).astype(dtype, copy=False)


QUANTIZERS = {
    "basic": basic_quant,
    "clamp": clamp_quant,
    "scale": scale_quant,
}
