"""Dense tensor kernels on numpy arrays (NCHW) with an exact integer path.

When both operands of ``conv2d``/``linear`` (or of their backward products)
are :class:`~eoq.quantcore.QTensor` values, the multiply-accumulate runs on the
integer numerators and the result is rescaled by the exact power of two of the
operand grids.  The MACs are issued through BLAS on integer-valued floats: the
worst-case partial sum is checked first, so float32 is used only when every
partial sum is below 2**24 and float64 only below 2**53 (both exact, so the
reduction order cannot change the result); beyond that an int64 matmul is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .quantcore import QTensor, dequantize

Tensor = np.ndarray
Operand = Union[np.ndarray, QTensor]


class ShapeError(ValueError):
    pass


class AccumulatorOverflow(ArithmeticError):
    """An integer reduction left the signed accumulator range."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid convolution geometry: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid channel counts: {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size * self.kernel_size

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo


# ---------------------------------------------------------------------------
# exact integer matmul

def _split(a: Operand) -> tuple[np.ndarray, int | None]:
    if isinstance(a, QTensor):
        return a.numerators, a.exponent
    return np.asarray(a), None


def int_matmul(a: np.ndarray, b: np.ndarray, acc_bits: int = 32) -> np.ndarray:
    """``a @ b`` for integer arrays, exact, returned as float64.

    Raises AccumulatorOverflow if any output leaves the signed ``acc_bits`` range.
    """
    k = a.shape[-1]
    amax = int(np.max(np.abs(a), initial=0))
    bmax = int(np.max(np.abs(b), initial=0))
    bound = amax * bmax * k
    if bound < 2**24:
        out = (a.astype(np.float32) @ b.astype(np.float32)).astype(np.float64)
    elif bound < 2**53:
        out = a.astype(np.float64) @ b.astype(np.float64)
    else:
        out = (a.astype(np.int64) @ b.astype(np.int64)).astype(np.float64)
    limit = 2 ** (acc_bits - 1) - 1
    if out.size and np.max(np.abs(out)) > limit:
        raise AccumulatorOverflow(
            f"integer reduction over {k} terms exceeds the {acc_bits}-bit accumulator; "
            "bit widths are too large for this layer size")
    return out


def _matmul(a: Operand, b: Operand, acc_bits: int = 32, a_t: bool = False) -> np.ndarray:
    """Shared matmul: integer path when both operands are QTensors.

    ``a_t`` transposes the (2-D) first operand.
    """
    an, ae = _split(a)
    bn, be = _split(b)
    if a_t:
        an = an.T
    if ae is not None and be is not None:
        return np.ldexp(int_matmul(an, bn, acc_bits), ae + be)
    if ae is not None:
        an = np.ldexp(an.astype(np.float64), ae)
    if be is not None:
        bn = np.ldexp(bn.astype(np.float64), be)
    return an @ bn


def _reshape(a: Operand, shape) -> Operand:
    if isinstance(a, QTensor):
        return QTensor(a.numerators.reshape(shape), a.grid_exp, a.bit_width, a.scale_exp)
    return a.reshape(shape)


def _transpose(a: Operand, axes) -> Operand:
    if isinstance(a, QTensor):
        return QTensor(np.ascontiguousarray(a.numerators.transpose(axes)),
                       a.grid_exp, a.bit_width, a.scale_exp)
    return a.transpose(axes)


def _shape(a: Operand) -> tuple[int, ...]:
    return a.shape


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_hw(h, w)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, ho, wo, c, k, k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[..., i, j] = x[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * k * k), ho, wo


def _col2im(cols: np.ndarray, x_shape, spec: ConvSpec) -> np.ndarray:
    n, c, h, w = x_shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_hw(h, w)
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    # fixed (i, j) order keeps the summation deterministic
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[..., i, j].transpose(0, 3, 1, 2)
    if p:
        out = out[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(out)


def _check_conv(x_shape, w_shape, spec: ConvSpec) -> None:
    if len(x_shape) != 4 or x_shape[1] != spec.in_channels:
        raise ShapeError(f"input shape {x_shape} does not match {spec}")
    if tuple(w_shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {w_shape} does not match {spec.weight_shape}")


def _cols(x: Operand, spec: ConvSpec):
    if isinstance(x, QTensor):
        cols, ho, wo = _im2col(x.numerators, spec)
        return QTensor(cols, x.grid_exp, x.bit_width, x.scale_exp), ho, wo
    return _im2col(np.asarray(x), spec)


def conv2d(x: Operand, w: Operand, spec: ConvSpec, acc_bits: int = 32) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (F,C,K,K); no bias."""
    _check_conv(_shape(x), _shape(w), spec)
    n = _shape(x)[0]
    cols, ho, wo = _cols(x, spec)
    wmat = _transpose(_reshape(w, (spec.out_channels, -1)), (1, 0))
    out = _matmul(cols, wmat, acc_bits)
    return np.ascontiguousarray(out.reshape(n, ho, wo, spec.out_channels).transpose(0, 3, 1, 2))


def conv2d_backward(e_out: Operand, x: Operand, w: Operand, spec: ConvSpec,
                    acc_bits: int = 32, grad_acc_bits: int = 64) -> tuple[Tensor, Tensor]:
    """Returns ``(e_in, g_w)``: the error w.r.t. the conv input and the weight gradient.

    The weight-gradient reduction runs over batch and spatial positions, so it
    gets its own (wider) accumulator.
    """
    x_shape = _shape(x)
    _check_conv(x_shape, _shape(w), spec)
    n = x_shape[0]
    ho, wo = spec.output_hw(x_shape[2], x_shape[3])
    if tuple(_shape(e_out)) != (n, spec.out_channels, ho, wo):
        raise ShapeError(f"error shape {_shape(e_out)} does not match output {(n, spec.out_channels, ho, wo)}")
    e_mat = _reshape(_transpose(e_out, (0, 2, 3, 1)), (n * ho * wo, spec.out_channels))
    wmat = _reshape(w, (spec.out_channels, -1))
    dcols = _matmul(e_mat, wmat, acc_bits)
    e_in = _col2im(dcols, x_shape, spec)
    cols, _, _ = _cols(x, spec)
    g_w = _matmul(e_mat, cols, grad_acc_bits, a_t=True).reshape(spec.weight_shape)
    return e_in, g_w


# ---------------------------------------------------------------------------
# dense layers and pointwise ops

def linear(x: Operand, w: Operand, b: np.ndarray | None = None, acc_bits: int = 32) -> Tensor:
    """``x @ w.T + b`` with ``x`` (N, in) and ``w`` (out, in)."""
    if len(_shape(x)) != 2 or len(_shape(w)) != 2 or _shape(x)[1] != _shape(w)[1]:
        raise ShapeError(f"linear: incompatible shapes {_shape(x)} and {_shape(w)}")
    out = _matmul(x, _transpose(w, (1, 0)), acc_bits)
    if b is not None:
        if b.shape != (_shape(w)[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {_shape(w)[0]} outputs")
        out = out + b
    return out


def linear_backward(e_out: Operand, x: Operand, w: Operand, acc_bits: int = 32,
                    grad_acc_bits: int = 64) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(e_in, g_w, g_b)``; integer path when all operands are QTensors."""
    if _shape(e_out) != (_shape(x)[0], _shape(w)[0]):
        raise ShapeError(f"error shape {_shape(e_out)} does not match {(_shape(x)[0], _shape(w)[0])}")
    e_in = _matmul(e_out, w, acc_bits)
    g_w = _matmul(e_out, x, grad_acc_bits, a_t=True)
    e = dequantize(e_out) if isinstance(e_out, QTensor) else e_out
    return e_in, g_w, e.sum(axis=0)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(e: Tensor, x: Tensor) -> Tensor:
    """Passes ``e`` where ``x > 0``; the subgradient at 0 is 0."""
    if e.shape != x.shape:
        raise ShapeError(f"relu_backward: {e.shape} vs {x.shape}")
    return np.where(x > 0, e, 0).astype(e.dtype, copy=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b


def scalar_mul(c: float, x: Tensor) -> Tensor:
    return c * x


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(e: Tensor, x_shape) -> Tensor:
    n, c, h, w = x_shape
    if e.shape != (n, c):
        raise ShapeError(f"pool error shape {e.shape} does not match {(n, c)}")
    return np.broadcast_to(e[:, :, None, None] / (h * w), x_shape).copy()


# ---------------------------------------------------------------------------
# loss

def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"invalid label index for {n_classes} classes")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_xent(logits: Tensor, labels, mix: tuple | None = None) -> tuple[float, Tensor]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    ``labels`` is an index array; with ``mix=(labels2, lam)`` the target is the
    blend ``lam * one_hot(labels) + (1 - lam) * one_hot(labels2)``.
    """
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    n, c = logits.shape
    target = _one_hot(labels, c)
    if mix is not None:
        labels2, lam = mix
        target = lam * target + (1.0 - lam) * _one_hot(labels2, c)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = float(-(target * logp).sum() / n)
    e = (np.exp(logp) - target) / n
    return loss, e.astype(logits.dtype, copy=False)
