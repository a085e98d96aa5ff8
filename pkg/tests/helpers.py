"""Shared fixtures for gradient checks on small models."""

import numpy as np

from eoq.initopt import FixupInitConfig, init_model
from eoq.network import ArchSpec, Model
from eoq.tensorops import softmax_xent


def toy_arch(**kw) -> ArchSpec:
    base = dict(in_channels=3, image_size=6, num_classes=3, stem_channels=4,
                stage_channels=(4, 8), blocks_per_stage=(1, 1))
    base.update(kw)
    return ArchSpec(**base)


def toy_model(kind="fixup", cfg=None, seed=0, arch=None, dtype=np.float64) -> Model:
    model = Model(arch or toy_arch(), kind, cfg, dtype=dtype)
    init_model(model, FixupInitConfig.for_model(model, seed))
    # move biases and scales off their initial values so every path is exercised
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():
        if p.role in ("bias", "head_bias", "bn_shift"):
            p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
        elif p.role in ("scale", "bn_scale"):
            p.data = p.data + 0.2 * rng.standard_normal(p.data.shape)
    return model


def model_fd_errors(model: Model, x, y, n_coords: int, rng, h: float = 1e-5) -> np.ndarray:
    """Relative errors of backprop against central differences on sampled coordinates.

    h = 1e-5 balances float64 roundoff (about 1e-16 / h) against relu kinks
    crossed inside the stencil.
    """
    def loss():
        return softmax_xent(model.forward(x, train=True), y)[0]

    _, e = softmax_xent(model.forward(x, train=True), y)
    model.backward(e)
    params = model.parameters()
    grads = [np.array(p.grad, dtype=np.float64).reshape(p.data.shape) for p in params]
    sizes = np.array([p.data.size for p in params])
    flat = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    errs = []
    for f in flat:
        j = int(np.searchsorted(bounds, f, side="right"))
        idx = np.unravel_index(f - (bounds[j] - sizes[j]), params[j].data.shape)
        p = params[j]
        old = p.data[idx]
        p.data[idx] = old + h
        up = loss()
        p.data[idx] = old - h
        dn = loss()
        p.data[idx] = old
        num = (up - dn) / (2 * h)
        ana = grads[j][idx]
        errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return np.array(errs)
