"""Jacobian trace probes for residual blocks and an analytic training-memory model.

The probe estimates the normalized trace ``tr(J J^T) / n`` of a block's
input-output Jacobian with the ratio ``|J v|^2 / |v|^2`` for isotropic Gaussian
``v``; for isotropic ``v`` this ratio is an unbiased estimate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .initopt import fixup_scale, kaiming_init
from .network import ArchSpec, BNBlock, FixupBlock, Model, ResidualBlock
from .tensorops import ConvSpec, relu


@dataclass(frozen=True)
class ProbeResult:
    block_index: int
    est_trace: float
    n_probes: int
    std_err: float


def _as_function(block) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(block, "forward"):
        return lambda x: block.forward(x)
    return block


def _jvp(block, f, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    if hasattr(block, "jvp"):
        return block.jvp(x, v)
    # central difference; exact up to rounding for piecewise-linear blocks away from kinks
    eps = 1e-6 * max(float(np.sqrt(np.mean(x * x))), 1.0)
    return (f(x + eps * v) - f(x - eps * v)) / (2 * eps)


def probe_ratios(block, x: np.ndarray, n_probes: int, rng: np.random.Generator) -> np.ndarray:
    f = _as_function(block)
    out = np.empty(n_probes)
    for i in range(n_probes):
        v = rng.standard_normal(x.shape)
        jv = _jvp(block, f, x, v)
        out[i] = np.sum(jv * jv) / np.sum(v * v)
    return out


def _summarize(ratios: np.ndarray, block_index: int) -> ProbeResult:
    n = ratios.size
    se = float(ratios.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return ProbeResult(block_index, float(ratios.mean()), n, se)


def estimate_block_isometry(block, input_shape=None, n_probes: int = 64, seed: int = 0,
                            x: Optional[np.ndarray] = None, block_index: int = 0) -> ProbeResult:
    """Monte-Carlo estimate of ``tr(J J^T) / n`` at the operating point ``x``.

    ``block`` is a callable or an object with ``forward`` (and optionally an
    exact ``jvp(x, v)``).  Without ``x`` the operating point is a standard
    normal draw of ``input_shape``.
    """
    if n_probes < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(seed)
    if x is None:
        if input_shape is None:
            raise ValueError("give either input_shape or an operating point x")
        x = rng.standard_normal(input_shape)
    return _summarize(probe_ratios(block, np.asarray(x, dtype=np.float64), n_probes, rng), block_index)


def expected_isometry(L: int, m: int) -> float:
    """Closed-form ``E[tr(J J^T)]`` of a Fixup residual block at initialization: ``1 + L^(-m/(m-1))``."""
    if L < 1 or m < 2:
        raise ValueError("need L >= 1 and m >= 2")
    return 1.0 + float(L) ** (-m / (m - 1))


# ---------------------------------------------------------------------------
# probe blocks at initialization

def make_residual_block(channels: int, m: int, scale: float, rng: np.random.Generator) -> ResidualBlock:
    """Float Fixup residual block (identity shortcut) with Kaiming branch weights times ``scale``."""
    units = []
    for j in range(m):
        u = FixupBlock(ConvSpec(channels, channels, 3, 1, 1), 0, m, f"probe.u{j}")
        u.w.data = scale * kaiming_init(u.spec.weight_shape, u.spec.fan_in, rng)
        units.append(u)
    return ResidualBlock(units)


class _ReluConvBN:
    """relu -> conv -> batch norm (training statistics), the layout analysed for BN networks."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.unit = BNBlock(ConvSpec(channels, channels, 3, 1, 1), "probe.bn", use_relu=False)
        self.unit.w.data = kaiming_init(self.unit.spec.weight_shape, self.unit.spec.fan_in, rng)

    def forward(self, x):
        return self.unit.forward(relu(x), None, True)


def _operating_point(shape, rng: np.random.Generator) -> np.ndarray:
    # post-relu activations of a unit-variance layer
    return relu(rng.standard_normal(shape)) * math.sqrt(2.0)


@dataclass(frozen=True)
class SweepRow:
    family: str
    block_index: int
    L: int
    m: int
    measured: float
    expected: float
    std_err: float


def measure_family(family: str, L: int = 1, m: int = 2, n_probes: int = 64, channels: int = 16,
                   spatial: int = 32, batch: int = 1, n_draws: int = 4, seed: int = 0) -> SweepRow:
    """Average probe over ``n_draws`` freshly initialized blocks of one family.

    Zero padding drops taps at the map border, which lowers every conv's trace
    by roughly ``(1 - 2/(3*spatial))**2``; keep ``spatial`` large.

    ``fixup`` scales the branch by ``L^(-1/(2m-2))``; ``control`` leaves it
    unscaled (expected trace 2); ``bn`` is relu -> conv -> BN (expected 1).
    """
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(n_draws):
        if family == "bn":
            block = _ReluConvBN(channels, rng)
            x = rng.standard_normal((batch, channels, spatial, spatial))
        else:
            scale = fixup_scale(L, m) if family == "fixup" else 1.0
            block = make_residual_block(channels, m, scale, rng)
            x = _operating_point((batch, channels, spatial, spatial), rng)
        ratios.append(probe_ratios(block, x, n_probes, rng))
    res = _summarize(np.concatenate(ratios), 0)
    expected = {"fixup": expected_isometry(L, m), "control": 2.0, "bn": 1.0}[family]
    return SweepRow(family, 0, L, m, res.est_trace, expected, res.std_err)


def isometry_sweep(model_family: str, L_values: Iterable[int], n_probes: int = 64, m: int = 2,
                   **kw) -> list[SweepRow]:
    """Measured vs expected block trace for each L."""
    return [measure_family(model_family, L, m, n_probes, seed=i, **kw)
            for i, L in enumerate(L_values)]


@dataclass(frozen=True)
class WitnessResult:
    per_block: tuple
    product: float
    end_to_end: float


def instability_witness(n_blocks: int = 20, m: int = 2, channels: int = 16, spatial: int = 32,
                        n_probes: int = 16, seed: int = 0) -> WitnessResult:
    """Chain ``n_blocks`` unscaled residual blocks; per-block traces multiply to roughly ``2**n_blocks``."""
    rng = np.random.default_rng(seed)
    blocks = [make_residual_block(channels, m, 1.0, rng) for _ in range(n_blocks)]
    x = _operating_point((1, channels, spatial, spatial), rng)
    per_block = []
    h = x
    for i, b in enumerate(blocks):
        per_block.append(_summarize(probe_ratios(b, h, n_probes, rng), i).est_trace)
        h = b.forward(h)

    def chain(z):
        for b in blocks:
            z = b.forward(z)
        return z

    e2e = _summarize(probe_ratios(chain, x, n_probes, rng), -1).est_trace
    return WitnessResult(tuple(per_block), float(np.prod(per_block)), e2e)


SWEEP_COLUMNS = ["block_index", "L", "m", "measured", "expected", "std_err"]


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family"] + SWEEP_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([r.family] + [d[c] for c in SWEEP_COLUMNS])


# ---------------------------------------------------------------------------
# memory model

@dataclass(frozen=True)
class MemoryReport:
    weights_bytes: int
    activations_bytes: int
    optimizer_bytes: int
    total_bytes: int
    batch_size: int

    @property
    def total_mb(self) -> float:
        return self.total_bytes / 2**20


MODES = ("vanilla32", "vanilla8", "eoq8")


def _layers(arch: ArchSpec):
    """Yields ``(kind, in_elems, out_elems, n_weights)`` per sample for every conv layer.

    ``kind`` is ``stem``, ``unit`` or ``proj``.
    """
    h = arch.image_size
    k, s = arch.stem_kernel, arch.stem_stride
    ho = (h + 2 * (k // 2) - k) // s + 1
    yield "stem", arch.in_channels * h * h, arch.stem_channels * ho * ho, arch.stem_channels * arch.in_channels * k * k
    h = ho
    if arch.stem_pool:
        yield "pool", arch.stem_channels * h * h, 0, 0
        h = (h + 2 - 3) // 2 + 1
    for _, c_in, c_out, stride in arch.block_plan():
        hi = h
        ho = (hi + 2 - 3) // stride + 1
        for j in range(arch.units_per_block):
            ci = c_in if j == 0 else c_out
            hin = hi if j == 0 else ho
            yield "unit", ci * hin * hin, c_out * ho * ho, c_out * ci * 9
        if stride != 1 or c_in != c_out:
            yield "proj", c_in * hi * hi, c_out * ho * ho, c_out * c_in
        h = ho


def memory_estimate(model, batch_size: int, mode: str) -> MemoryReport:
    """Bytes resident during training for ``model`` (a Model or ArchSpec).

    Counted: weights at the mode's precision, one gradient per weight at that
    precision plus a real (4-byte) momentum buffer, and the activations kept for
    backward.  Every conv keeps its input.  Batch-norm modes keep the
    pre-normalized and the normalized conv output (twice the output size);
    Fixup units keep the conv output instead, which the scale gradient needs.
    Relu masks are recovered from the next cached tensor; a max-pool keeps its
    input.  The classifier head stays in 4-byte precision in every mode.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if batch_size < 0:
        raise ValueError("batch size must be >= 0")
    arch = model.arch if isinstance(model, Model) else model
    bpv = 4 if mode == "vanilla32" else 1
    bn = mode != "eoq8"

    n_w = acts = 0
    for kind, e_in, e_out, nw in _layers(arch):
        n_w += nw
        acts += e_in
        if kind == "pool":
            continue
        if bn:
            acts += 2 * e_out
        elif kind == "unit":
            acts += e_out
    # BN carries per-channel gamma/beta; Fixup units carry scalar b1, b2, gamma
    n_aux = _affine_count(arch, bn)
    head = arch.stage_channels[-1] * arch.num_classes + arch.num_classes
    acts += arch.stage_channels[-1]  # pooled features feeding the head

    weights = (n_w + n_aux) * bpv + head * 4
    optimizer = (n_w + n_aux) * (bpv + 4) + head * 8
    activations = batch_size * acts * bpv
    return MemoryReport(weights, activations, optimizer, weights + activations + optimizer, batch_size)


def _affine_count(arch: ArchSpec, bn: bool) -> int:
    n = 0
    c_stem = arch.stem_channels
    if bn:
        n += 2 * c_stem
    for _, c_in, c_out, stride in arch.block_plan():
        if bn:
            n += 2 * c_out * arch.units_per_block
            if stride != 1 or c_in != c_out:
                n += 2 * c_out
        else:
            n += 3 * arch.units_per_block
    return n
