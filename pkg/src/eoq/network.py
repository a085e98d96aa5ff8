"""Fixup residual network trained end to end on power-of-two grids.

One :class:`FixupBlock` is the bias / conv / scale / bias / relu unit::

    x1 = x0 + Q_b(b1)
    x2 = Q_a1(conv(x1, Q_w(w)))
    x3 = Q_gamma(gamma) * x2
    x4 = x3 + Q_b(b2)
    x5 = Q_a2(relu(x4))

and its backward pass quantizes the error twice (after the scale product and
after the transposed convolution) and every parameter gradient once.  With
``cfg=None`` every quantizer is the identity, which gives the float Fixup
baseline.  A batch-normalized ResNet is included as a float reference.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .quantcore import QUANTIZERS, BitWidthConfig, QTensor, dequantize, on_grid
from .tensorops import (ConvSpec, ShapeError, conv2d, conv2d_backward, global_avg_pool,
                        global_avg_pool_backward, linear, linear_backward, relu, relu_backward)

# counts batch-statistics computations (BN in training mode)
BATCH_STATS: Counter = Counter()

_TRACE: Optional[list] = None


@contextmanager
def record_quantizers():
    """Collect the sequence of quantizer sites hit inside the ``with`` body."""
    global _TRACE
    prev, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


def _quant(site: str, kind: str, x, k: int) -> QTensor:
    if _TRACE is not None:
        _TRACE.append(site)
    return QUANTIZERS[kind](x, k)


class CacheError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parameters

STORAGE = {"w": ("clamp", "k_w"), "b": ("basic", "k_b"), "gamma": ("basic", "k_gamma")}


class Param:
    """A trainable tensor.

    ``kind`` selects the storage grid in quantized models: ``w`` (clamp grid of
    k_w), ``b`` (basic grid of k_b), ``gamma`` (basic grid of k_gamma) or
    ``real`` (never quantized).  ``role`` tells the initializer what to do.
    """

    def __init__(self, name: str, data: np.ndarray, kind: str, role: str,
                 fan_in: int = 0, block: Optional[int] = None):
        self.name = name
        self.data = data
        self.kind = kind
        self.role = role
        self.fan_in = fan_in
        self.block = block
        self.grad = None

    @property
    def quantized(self) -> bool:
        return self.kind != "real"

    def storage_quant(self, x, cfg: BitWidthConfig) -> QTensor:
        kind, field = STORAGE[self.kind]
        return QUANTIZERS[kind](x, getattr(cfg, field))

    def q(self, cfg: BitWidthConfig, site: str) -> QTensor:
        kind, field = STORAGE[self.kind]
        return _quant(site, kind, self.data, getattr(cfg, field))

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape}, kind={self.kind})"


def _values(x) -> np.ndarray:
    return dequantize(x) if isinstance(x, QTensor) else np.asarray(x, dtype=np.float64)


def _act_grid(x: np.ndarray, cfg: BitWidthConfig) -> QTensor:
    return on_grid(x, cfg.k_a - 1, cfg.k_a)


def _acc_bits(cfg: BitWidthConfig) -> int:
    """Forward/error accumulator width: 32 bits covers 8-bit operands at any
    practical fan-in; wider operands get a 64-bit accumulator."""
    return 32 if max(cfg.k_w, cfg.k_a, cfg.k_b, cfg.k_e) <= 8 else 64


def _inside(x: np.ndarray, k: int) -> np.ndarray:
    bound = 1.0 - 2.0 ** (1 - k)
    return np.abs(x) < bound


def ste_quantizer_backward(e: np.ndarray, x_prequant: np.ndarray, kind: str, k: int) -> np.ndarray:
    """Straight-through gradient of a quantizer.

    Basic and scale quantizers pass ``e`` unchanged.  Clamp quantizers pass it
    only where the pre-quantization value is strictly inside the clamp range;
    a value sitting exactly on the bound counts as clipped.
    """
    if e.shape != np.shape(x_prequant):
        raise ShapeError(f"ste: {e.shape} vs {np.shape(x_prequant)}")
    if kind in ("basic", "scale"):
        return e
    if kind != "clamp":
        raise ValueError(f"unknown quantizer kind {kind!r}")
    return np.where(_inside(np.asarray(x_prequant), k), e, 0.0).astype(e.dtype, copy=False)


# ---------------------------------------------------------------------------
# Fixup unit

class FixupBlock:
    """bias -> conv -> scale -> bias -> relu, with the quantizers above."""

    def __init__(self, spec: ConvSpec, index: int = 0, depth: int = 2, name: str = "unit",
                 role: str = "branch"):
        self.spec = spec
        self.index = index
        self.depth = depth
        self.w = Param(f"{name}.w", np.zeros(spec.weight_shape), "w", role, spec.fan_in, index)
        self.b1 = Param(f"{name}.b1", np.zeros(1), "b", "bias", block=index)
        self.b2 = Param(f"{name}.b2", np.zeros(1), "b", "bias", block=index)
        self.gamma = Param(f"{name}.gamma", np.ones(1), "gamma", "scale", block=index)
        self.cache = None

    def params(self) -> list[Param]:
        return [self.w, self.b1, self.b2, self.gamma]

    def forward(self, x0, cfg: Optional[BitWidthConfig] = None, train: bool = True) -> np.ndarray:
        if cfg is None:
            x0 = np.asarray(x0)
            x1 = x0 + self.b1.data[0]
            x2 = conv2d(x1, self.w.data, self.spec)
            x4 = self.gamma.data[0] * x2 + self.b2.data[0]
            self.cache = {"x1": x1, "x2": x2, "x4": x4}
            return relu(x4)

        dtype = np.asarray(self.w.data).dtype
        b1 = self.b1.q(cfg, "Q_b(b1)")
        g1 = max(cfg.k_a, cfg.k_b)
        x1 = on_grid(_values(x0) + dequantize(b1)[0], g1 - 1, g1)
        wq = self.w.q(cfg, "Q_w")
        x2 = _quant("Q_a1", "basic", conv2d(x1, wq, self.spec, _acc_bits(cfg)), cfg.k_a)
        gq = self.gamma.q(cfg, "Q_gamma")
        b2 = self.b2.q(cfg, "Q_b(b2)")
        x4 = dequantize(gq)[0] * dequantize(x2) + dequantize(b2)[0]
        x5 = _quant("Q_a2", "clamp", relu(x4), cfg.k_a)
        self.cache = {"x1": x1, "x2": x2, "x4": x4, "wq": wq, "gq": gq}
        return dequantize(x5, dtype)

    def backward(self, e0, cfg: Optional[BitWidthConfig] = None) -> np.ndarray:
        """Returns the error for the unit input; parameter gradients land in ``.grad``."""
        if self.cache is None:
            raise CacheError("backward before forward")
        c, self.cache = self.cache, None
        e0 = np.asarray(e0)

        if cfg is None:
            e1 = relu_backward(e0, c["x4"])
            e3 = self.gamma.data[0] * e1
            e4, g_w = conv2d_backward(e3, c["x1"], self.w.data, self.spec)
            self.w.grad = g_w
            self.b1.grad = np.array([e4.sum()])
            self.b2.grad = np.array([e1.sum()])
            self.gamma.grad = np.array([(e1 * c["x2"]).sum()])
            return e4

        dtype = e0.dtype
        x4 = c["x4"]
        e1 = relu_backward(ste_quantizer_backward(e0.astype(np.float64), relu(x4), "clamp", cfg.k_a), x4)
        e2 = e1
        e3 = _quant("Q_e", "scale", e2 * dequantize(c["gq"])[0], cfg.k_e)
        e_in, g_w = conv2d_backward(e3, c["x1"], c["wq"], self.spec, _acc_bits(cfg))
        e4 = _quant("Q_e", "scale", e_in, cfg.k_e)
        e4v = dequantize(e4)
        self.w.grad = _quant("Q_g", "scale", g_w, cfg.k_g)
        self.b1.grad = _quant("Q_g", "scale", [e4v.sum()], cfg.k_g)
        self.b2.grad = _quant("Q_g", "scale", [e1.sum()], cfg.k_g)
        self.gamma.grad = _quant("Q_g", "scale", [(e2 * dequantize(c["x2"])).sum()], cfg.k_g)
        return e4v.astype(dtype, copy=False)


def fixup_block_forward(block: FixupBlock, x0, cfg: BitWidthConfig) -> QTensor:
    """Functional form: returns the unit output as a QTensor on the k_a clamp grid."""
    return _act_grid(block.forward(x0, cfg), cfg)


def fixup_block_backward(block: FixupBlock, e0, cfg: BitWidthConfig):
    """Functional form: ``(e5, g_w, g_b1, g_b2, g_gamma)``."""
    e5 = block.backward(e0, cfg)
    return e5, block.w.grad, block.b1.grad, block.b2.grad, block.gamma.grad


class Projection:
    """Strided 1x1 shortcut conv on the k_w grid, no scale or bias."""

    def __init__(self, spec: ConvSpec, name: str = "proj", index: Optional[int] = None):
        self.spec = spec
        self.w = Param(f"{name}.w", np.zeros(spec.weight_shape), "w", "main", spec.fan_in, index)
        self.cache = None

    def params(self) -> list[Param]:
        return [self.w]

    def forward(self, x, cfg=None, train=True):
        if cfg is None:
            self.cache = np.asarray(x)
            return conv2d(self.cache, self.w.data, self.spec)
        xq = _act_grid(_values(x), cfg)
        wq = self.w.q(cfg, "Q_w(proj)")
        y = _quant("Q_a1(proj)", "basic", conv2d(xq, wq, self.spec, _acc_bits(cfg)), cfg.k_a)
        self.cache = (xq, wq)
        return dequantize(y, np.asarray(self.w.data).dtype)

    def backward(self, e, cfg=None):
        if self.cache is None:
            raise CacheError("backward before forward")
        c, self.cache = self.cache, None
        if cfg is None:
            e_in, self.w.grad = conv2d_backward(e, c, self.w.data, self.spec)
            return e_in
        xq, wq = c
        e64 = np.asarray(e, dtype=np.float64)
        # shortcut errors stay in real precision
        e_in, g_w = conv2d_backward(e64, dequantize(xq), dequantize(wq), self.spec)
        self.w.grad = _quant("Q_g(proj)", "scale", g_w, cfg.k_g)
        return e_in.astype(np.asarray(e).dtype, copy=False)


class StemConv:
    """Input conv of the Fixup model: CQ(input) -> conv -> Q_a1 -> relu -> Q_a2."""

    def __init__(self, spec: ConvSpec, name: str = "stem"):
        self.spec = spec
        self.w = Param(f"{name}.w", np.zeros(spec.weight_shape), "w", "main", spec.fan_in)
        self.cache = None

    def params(self) -> list[Param]:
        return [self.w]

    def forward(self, x, cfg=None, train=True):
        if cfg is None:
            x = np.asarray(x)
            y = conv2d(x, self.w.data, self.spec)
            self.cache = (x, y)
            return relu(y)
        xq = _quant("Q_a(input)", "clamp", x, cfg.k_a)
        wq = self.w.q(cfg, "Q_w(stem)")
        y = dequantize(_quant("Q_a1(stem)", "basic", conv2d(xq, wq, self.spec, _acc_bits(cfg)), cfg.k_a))
        out = _quant("Q_a2(stem)", "clamp", relu(y), cfg.k_a)
        self.cache = (xq, wq, y)
        return dequantize(out, np.asarray(self.w.data).dtype)

    def backward(self, e, cfg=None):
        if self.cache is None:
            raise CacheError("backward before forward")
        c, self.cache = self.cache, None
        if cfg is None:
            x, y = c
            e_in, self.w.grad = conv2d_backward(relu_backward(e, y), x, self.w.data, self.spec)
            return e_in
        xq, wq, y = c
        e1 = relu_backward(ste_quantizer_backward(np.asarray(e, np.float64), relu(y), "clamp", cfg.k_a), y)
        eq = _quant("Q_e(stem)", "scale", e1, cfg.k_e)
        e_in, g_w = conv2d_backward(eq, xq, wq, self.spec, _acc_bits(cfg))
        self.w.grad = _quant("Q_g(stem)", "scale", g_w, cfg.k_g)
        return e_in


# ---------------------------------------------------------------------------
# batch-norm reference

BN_EPS = 1e-5


class BatchNorm2d:
    def __init__(self, channels: int, name: str = "bn", eps: float = BN_EPS, momentum: float = 0.1):
        self.gamma = Param(f"{name}.gamma", np.ones(channels), "real", "bn_scale")
        self.beta = Param(f"{name}.beta", np.zeros(channels), "real", "bn_shift")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self.name = name
        self.cache = None

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if train:
            BATCH_STATS["bn"] += 1
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.size // x.shape[1]
            unbiased = var * m / (m - 1) if m > 1 else var
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self.cache = (xhat, inv_std, train)
        g, b = self.gamma.data, self.beta.data
        return (g[None, :, None, None] * xhat + b[None, :, None, None]).astype(x.dtype, copy=False)

    def backward(self, e: np.ndarray) -> np.ndarray:
        if self.cache is None:
            raise CacheError("backward before forward")
        (xhat, inv_std, train), self.cache = self.cache, None
        self.gamma.grad = (e * xhat).sum(axis=(0, 2, 3))
        self.beta.grad = e.sum(axis=(0, 2, 3))
        dxhat = e * self.gamma.data[None, :, None, None]
        inv = inv_std[None, :, None, None]
        if not train:
            return dxhat * inv
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (dxhat - mean_d - xhat * mean_dx) * inv


class BNBlock:
    """conv -> batch norm (-> relu), float precision only."""

    def __init__(self, spec: ConvSpec, name: str = "bnunit", use_relu: bool = True,
                 index: Optional[int] = None, role: str = "main"):
        self.spec = spec
        self.w = Param(f"{name}.w", np.zeros(spec.weight_shape), "w", role, spec.fan_in, index)
        self.bn = BatchNorm2d(spec.out_channels, name=f"{name}.bn")
        self.use_relu = use_relu
        self.index = index
        self.cache = None

    def params(self) -> list[Param]:
        return [self.w] + self.bn.params()

    def buffers(self):
        return self.bn.buffers()

    def forward(self, x, cfg=None, train=True):
        if cfg is not None:
            raise ValueError("batch-norm blocks only run in float mode")
        x = np.asarray(x)
        z = self.bn.forward(conv2d(x, self.w.data, self.spec), train)
        self.cache = (x, z)
        return relu(z) if self.use_relu else z

    def backward(self, e, cfg=None):
        if self.cache is None:
            raise CacheError("backward before forward")
        (x, z), self.cache = self.cache, None
        if self.use_relu:
            e = relu_backward(e, z)
        e_in, self.w.grad = conv2d_backward(self.bn.backward(e), x, self.w.data, self.spec)
        return e_in


def bn_block_forward(block: BNBlock, x: np.ndarray, train: bool = True) -> np.ndarray:
    return block.forward(x, None, train)


def bn_block_backward(block: BNBlock, e: np.ndarray) -> np.ndarray:
    return block.backward(e)


# ---------------------------------------------------------------------------
# residual structure and model

class ResidualBlock:
    """``out = shortcut(x) + branch(x)``; the sum is clamp-quantized to k_a when
    quantized, or passed through relu for the batch-norm variant."""

    def __init__(self, units: Sequence, shortcut=None, post_relu: bool = False, name: str = "block"):
        self.units = list(units)
        self.shortcut = shortcut
        self.post_relu = post_relu
        self.name = name
        self.cache = None

    @property
    def depth(self) -> int:
        return len(self.units)

    def params(self) -> list[Param]:
        ps = [p for u in self.units for p in u.params()]
        if self.shortcut is not None:
            ps += self.shortcut.params()
        return ps

    def buffers(self) -> dict:
        out = {}
        for u in self.units + ([self.shortcut] if self.shortcut is not None else []):
            if hasattr(u, "buffers"):
                out.update(u.buffers())
        return out

    def forward(self, x, cfg=None, train=True):
        x = np.asarray(x)
        h = x if self.shortcut is None else self.shortcut.forward(x, cfg, train)
        r = x
        for u in self.units:
            r = u.forward(r, cfg, train)
        s = h + r
        self.cache = s
        if self.post_relu:
            s = relu(s)
        if cfg is not None:
            s = dequantize(_quant("Q_a(block)", "clamp", s, cfg.k_a), x.dtype)
        return s

    def backward(self, e, cfg=None):
        if self.cache is None:
            raise CacheError("backward before forward")
        s, self.cache = self.cache, None
        e = np.asarray(e)
        if cfg is not None:
            pre = relu(s) if self.post_relu else s
            e = ste_quantizer_backward(e, pre, "clamp", cfg.k_a)
        if self.post_relu:
            e = relu_backward(e, s)
        er = e
        for u in reversed(self.units):
            er = u.backward(er, cfg)
        eh = e if self.shortcut is None else self.shortcut.backward(e, cfg)
        return er + eh


@dataclass(frozen=True)
class ArchSpec:
    """Shape of a CIFAR/ImageNet style ResNet: stem, stages of residual blocks, linear head."""

    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: tuple = (3, 3, 3)
    units_per_block: int = 2
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False  # 3x3/2 max-pool after the stem; shape accounting only

    def __post_init__(self):
        if isinstance(self.blocks_per_stage, int):
            object.__setattr__(self, "blocks_per_stage", (self.blocks_per_stage,) * len(self.stage_channels))
        if len(self.blocks_per_stage) != len(self.stage_channels):
            raise ValueError("blocks_per_stage and stage_channels differ in length")
        if self.units_per_block < 2:
            raise ValueError("residual branches need at least 2 layers")

    @property
    def num_blocks(self) -> int:
        return int(sum(self.blocks_per_stage))

    def block_plan(self):
        """Yields ``(stage, in_ch, out_ch, stride)`` for every residual block."""
        c_in = self.stem_channels
        for s, (c_out, n) in enumerate(zip(self.stage_channels, self.blocks_per_stage)):
            for b in range(n):
                stride = 2 if (s > 0 and b == 0) else 1
                yield s, c_in, c_out, stride
                c_in = c_out


def resnet20_arch(blocks_per_stage: int = 3, **kw) -> ArchSpec:
    return ArchSpec(blocks_per_stage=(blocks_per_stage,) * 3, **kw)


def resnet18_imagenet_arch() -> ArchSpec:
    return ArchSpec(in_channels=3, image_size=224, num_classes=1000, stem_channels=64,
                    stage_channels=(64, 128, 256, 512), blocks_per_stage=(2, 2, 2, 2),
                    units_per_block=2, stem_kernel=7, stem_stride=2, stem_pool=True)


class Model:
    """Stem -> residual stages -> global average pool -> real-precision linear head.

    ``kind`` is ``"fixup"`` (optionally quantized via ``cfg``) or ``"bn"``.
    """

    def __init__(self, arch: ArchSpec, kind: str = "fixup", cfg: Optional[BitWidthConfig] = None,
                 dtype=np.float64):
        if kind not in ("fixup", "bn"):
            raise ValueError(f"unknown model kind {kind!r}")
        if kind == "bn" and cfg is not None:
            raise ValueError("the batch-norm reference model is float only")
        if arch.stem_pool:
            raise ValueError("max-pool stems are only supported by the memory estimator")
        self.arch = arch
        self.kind = kind
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        pad = arch.stem_kernel // 2
        stem_spec = ConvSpec(arch.in_channels, arch.stem_channels, arch.stem_kernel, arch.stem_stride, pad)
        self.stem = StemConv(stem_spec) if kind == "fixup" else BNBlock(stem_spec, "stem")
        self.blocks: list[ResidualBlock] = []
        for i, (s, c_in, c_out, stride) in enumerate(arch.block_plan()):
            name = f"s{s}.b{i}"
            units = []
            for j in range(arch.units_per_block):
                spec = ConvSpec(c_in if j == 0 else c_out, c_out, 3, stride if j == 0 else 1, 1)
                if kind == "fixup":
                    units.append(FixupBlock(spec, i, arch.units_per_block, f"{name}.u{j}"))
                else:
                    last = j == arch.units_per_block - 1
                    units.append(BNBlock(spec, f"{name}.u{j}", use_relu=not last, index=i, role="branch"))
            shortcut = None
            if stride != 1 or c_in != c_out:
                pspec = ConvSpec(c_in, c_out, 1, stride, 0)
                if kind == "fixup":
                    shortcut = Projection(pspec, f"{name}.proj", i)
                else:
                    shortcut = BNBlock(pspec, f"{name}.proj", use_relu=False, index=i)
            self.blocks.append(ResidualBlock(units, shortcut, post_relu=(kind == "bn"), name=name))
        c_last = arch.stage_channels[-1]
        self.head_w = Param("head.w", np.zeros((arch.num_classes, c_last)), "real", "head", c_last)
        self.head_b = Param("head.b", np.zeros(arch.num_classes), "real", "head_bias")
        self.cache = None

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def parameters(self) -> list[Param]:
        ps = self.stem.params()
        for b in self.blocks:
            ps += b.params()
        return ps + [self.head_w, self.head_b]

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self.stem.buffers()) if hasattr(self.stem, "buffers") else {}
        for b in self.blocks:
            out.update(b.buffers())
        return out

    def cast(self, dtype) -> "Model":
        self.dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(self.dtype)
        return self

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise ShapeError(f"expected (N, {self.arch.in_channels}, H, W) input, got {x.shape}")
        h = self.stem.forward(x, self.cfg, train)
        for b in self.blocks:
            h = b.forward(h, self.cfg, train)
        pooled = global_avg_pool(h)
        self.cache = (h.shape, pooled)
        return linear(pooled, self.head_w.data, self.head_b.data)

    def backward(self, e_logits: np.ndarray) -> np.ndarray:
        """Fills ``.grad`` of every parameter; returns the error w.r.t. the input."""
        if self.cache is None:
            raise CacheError("backward before forward")
        (h_shape, pooled), self.cache = self.cache, None
        e_pool, self.head_w.grad, self.head_b.grad = linear_backward(
            np.asarray(e_logits, dtype=self.dtype), pooled, self.head_w.data)
        e = global_avg_pool_backward(e_pool, h_shape)
        for b in reversed(self.blocks):
            e = b.backward(e, self.cfg)
        return self.stem.backward(e, self.cfg)


def model_forward(model: Model, batch: np.ndarray, train: bool = True) -> np.ndarray:
    return model.forward(batch, train)


def model_backward(model: Model, e_logits: np.ndarray) -> dict[str, object]:
    model.backward(e_logits)
    return {p.name: p.grad for p in model.parameters()}
