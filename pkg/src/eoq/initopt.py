"""Fixup initialization and SGD with quantized updates and 8-bit weight storage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .network import Model, Param
from .quantcore import BitWidthConfig, QTensor, dequantize, scale_quant

SeedLike = Union[int, np.random.Generator, None]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def kaiming_init(shape, fan_in: int, seed: SeedLike = None) -> np.ndarray:
    """i.i.d. N(0, 2 / fan_in) samples."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return _rng(seed).normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def fixup_scale(L: int, m: int) -> float:
    """Residual-branch weight multiplier ``L ** (-1 / (2m - 2))``."""
    if L < 1:
        raise ValueError(f"need at least one residual block, got L={L}")
    if m < 2:
        raise ValueError(f"branch depth m={m} makes the Fixup exponent singular (need m >= 2)")
    return float(L) ** (-1.0 / (2 * m - 2))


@dataclass
class FixupInitConfig:
    L: int
    m: Sequence[int]
    seed: int = 0
    fixup: bool = True  # False gives the unscaled Kaiming control

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if isinstance(self.m, int):
            self.m = [self.m] * self.L
        if any(mi < 2 for mi in self.m):
            raise ValueError("every branch needs m_i >= 2")

    @classmethod
    def for_model(cls, model: Model, seed: int = 0, fixup: bool = True) -> "FixupInitConfig":
        return cls(model.num_blocks, [b.depth for b in model.blocks], seed, fixup)


def init_model(model: Model, cfg: FixupInitConfig) -> Model:
    """Kaiming everywhere, Fixup-scaled residual branches, gamma=1, biases 0.

    Weights of a quantized model are then clamp-quantized onto the k_w grid.
    Parameters draw from one generator in ``model.parameters()`` order.
    """
    rng = _rng(cfg.seed)
    for p in model.parameters():
        if p.role in ("branch", "main", "head"):
            w = kaiming_init(p.data.shape, p.fan_in, rng)
            if p.role == "branch" and cfg.fixup and model.kind == "fixup":
                w = w * fixup_scale(cfg.L, cfg.m[p.block])
        elif p.role in ("scale", "bn_scale"):
            w = np.ones(p.data.shape)
        else:
            w = np.zeros(p.data.shape)
        if model.cfg is not None and p.quantized:
            w = dequantize(p.storage_quant(w, model.cfg))
        p.data = w.astype(model.dtype)
        p.grad = None
    return model


# ---------------------------------------------------------------------------
# learning rate

@dataclass(frozen=True)
class LRSchedule:
    """Piecewise constant: ``lr0`` times ``factor`` at each milestone fraction of training."""

    lr0: float = 0.1
    total_epochs: int = 30
    milestones: tuple = (0.5, 0.75)
    factor: float = 0.1

    def __call__(self, epoch: int) -> float:
        drops = sum(epoch >= int(f * self.total_epochs) for f in self.milestones)
        return self.lr0 * self.factor ** drops


def lr_schedule(epoch: int, lr0: float = 0.1, total_epochs: int = 30) -> float:
    return LRSchedule(lr0, total_epochs)(epoch)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    lr: float = 0.1
    momentum: float = 0.9
    k_u: int = 8
    weight_decay: float = 0.0
    schedule: Optional[LRSchedule] = None
    buffers: dict = field(default_factory=dict)
    step_count: int = 0
    dead: int = 0
    live: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def set_epoch(self, epoch: int) -> None:
        if self.schedule is not None:
            self.lr = self.schedule(epoch)

    def pop_dead_fraction(self) -> float:
        """Fraction of attempted quantized-parameter updates that left the stored value unchanged."""
        total = self.dead + self.live
        frac = self.dead / total if total else 0.0
        self.dead = self.live = 0
        return frac


def _grad_values(g) -> np.ndarray:
    return dequantize(g) if isinstance(g, QTensor) else np.asarray(g, dtype=np.float64)


def sgd_step(state: OptimState, params: Sequence[Param], cfg: Optional[BitWidthConfig] = None) -> None:
    """One momentum-SGD step in place.

    With ``cfg`` set, every quantized parameter takes the update
    ``u = SQ(lr * v, k_u)`` and is re-quantized to its storage grid; the
    momentum ``v`` stays in real precision.  Real parameters (head, BN affine)
    use plain SGD.
    """
    for p in params:
        if p.grad is None:
            continue
        g = _grad_values(p.grad)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.name} {p.data.shape}")
        w = p.data.astype(np.float64)
        if state.weight_decay:
            g = g + state.weight_decay * w
        v = state.buffers.get(p.name)
        v = g.copy() if v is None else state.momentum * v + g
        state.buffers[p.name] = v
        step = state.lr * v
        if cfg is not None and p.quantized:
            u = dequantize(scale_quant(step, state.k_u))
            new = dequantize(p.storage_quant(w - u, cfg))
            attempted = step != 0
            stuck = attempted & (new == w)
            state.dead += int(stuck.sum())
            state.live += int(attempted.sum() - stuck.sum())
        else:
            new = w - step
        p.data = new.astype(p.data.dtype)
        p.grad = None
    state.step_count += 1
