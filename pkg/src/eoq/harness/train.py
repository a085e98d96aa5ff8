"""Training and evaluation loops with per-epoch metrics and checkpoints."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..initopt import FixupInitConfig, LRSchedule, OptimState, init_model, sgd_step
from ..network import ArchSpec, Model
from ..quantcore import BitWidthConfig
from ..tensorops import softmax_xent
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SynthSpec, augment, load_cifar10, mixup_permuted, synth_dataset

MODES = ("bn_float", "fixup_float", "eoq8", "custom")
METRICS_HEADER = ["epoch", "train_loss", "train_acc", "val_top1", "val_top5", "lr",
                  "dead_update_frac", "wall_s"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "fixup_float"
    blocks_per_stage: int = 3
    stage_channels: tuple = (16, 32, 64)
    data: Optional[str] = None          # CIFAR-10 directory; None means synthetic
    synthetic: SynthSpec = field(default_factory=SynthSpec)
    subset: Optional[int] = None        # first n training samples only
    batch_size: int = 128
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    mixup_alpha: float = 0.0            # 0 disables mixup
    augment: Optional[bool] = None      # None: on for CIFAR-10, off for synthetic data
    bits: BitWidthConfig = field(default_factory=BitWidthConfig)
    seed: int = 0
    out: str = "runs/default"
    dtype: str = "float32"
    resume: bool = False
    record_wall_time: bool = False      # off keeps metrics.csv byte-reproducible

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0")
        if isinstance(self.bits, dict):
            self.bits = BitWidthConfig(**self.bits)
        if isinstance(self.synthetic, dict):
            self.synthetic = SynthSpec(**self.synthetic)
        self.stage_channels = tuple(self.stage_channels)

    @property
    def use_augment(self) -> bool:
        return bool(self.data) if self.augment is None else self.augment

    @property
    def model_kind(self) -> str:
        return "bn" if self.mode == "bn_float" else "fixup"

    @property
    def quant_cfg(self) -> Optional[BitWidthConfig]:
        if self.mode == "eoq8":
            return BitWidthConfig.uniform(8)
        if self.mode == "custom":
            return self.bits
        return None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_top1: float
    val_top5: float
    lr: float
    dead_update_frac: float
    wall_s: float

    def row(self) -> list[str]:
        return [str(self.epoch), f"{self.train_loss:.6f}", f"{self.train_acc:.4f}",
                f"{self.val_top1:.4f}", f"{self.val_top5:.4f}", f"{self.lr:.8g}",
                f"{self.dead_update_frac:.6f}", f"{self.wall_s:.3f}"]


@dataclass
class TrainResult:
    model: Model
    optim: OptimState
    records: list
    out: Path


def load_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    if cfg.data:
        train_set, val_set = load_cifar10(cfg.data)
    else:
        train_set, val_set = synth_dataset(cfg.synthetic, cfg.seed)
    if cfg.subset:
        train_set = train_set.subset(cfg.subset)
    return train_set, val_set


def build_model(cfg: TrainConfig, data: Dataset) -> Model:
    _, c, h, _ = data.images.shape
    arch = ArchSpec(in_channels=c, image_size=h, num_classes=data.num_classes,
                    stem_channels=cfg.stage_channels[0], stage_channels=cfg.stage_channels,
                    blocks_per_stage=cfg.blocks_per_stage)
    model = Model(arch, cfg.model_kind, cfg.quant_cfg, dtype=cfg.dtype)
    init_model(model, FixupInitConfig.for_model(model, cfg.seed))
    return model


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Per-sample hit within the top ``k``; ties go to the lower class index."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Top-1 and top-5 accuracy in percent, inference mode, no augmentation."""
    k = min(5, data.num_classes)
    hit1 = hit5 = 0
    for i in range(0, len(data), batch_size):
        logits = model.forward(data.images[i:i + batch_size], train=False)
        y = data.labels[i:i + batch_size]
        hit1 += int(topk_correct(logits, y, 1).sum())
        hit5 += int(topk_correct(logits, y, k).sum())
    n = max(len(data), 1)
    return 100.0 * hit1 / n, 100.0 * hit5 / n


def _stats(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    fin = a[np.isfinite(a)]
    return {"shape": list(a.shape), "nan": int(np.isnan(a).sum()), "inf": int(np.isinf(a).sum()),
            "min": float(fin.min()) if fin.size else None, "max": float(fin.max()) if fin.size else None,
            "mean_abs": float(np.abs(fin).mean()) if fin.size else None}


def _dump_divergence(out: Path, epoch: int, step: int, x, logits, model: Model) -> Path:
    dump = {"epoch": epoch, "step": step, "input": _stats(x), "logits": _stats(logits),
            "params": {p.name: _stats(p.data) for p in model.parameters()}}
    path = out / "divergence.json"
    path.write_text(json.dumps(dump, indent=2))
    return path


def _batch_pad(size: int) -> int:
    return max(1, size // 8)


def _read_metrics(path: Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["epoch"]), *(float(r[c]) for c in METRICS_HEADER[1:])) for r in rows]


def _write_metrics(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.row())


def train_epoch(model: Model, optim: OptimState, data: Dataset, cfg: TrainConfig, epoch: int,
                out: Path) -> tuple[float, float]:
    """One pass over ``data``; returns (mean loss, train accuracy in percent)."""
    rng = np.random.default_rng([cfg.seed, epoch])
    perm = rng.permutation(len(data))
    loss_sum = hits = 0.0
    for step, i in enumerate(range(0, len(data), cfg.batch_size)):
        idx = perm[i:i + cfg.batch_size]
        x, y = data.images[idx], data.labels[idx]
        if cfg.use_augment:
            x = augment(x, rng, _batch_pad(x.shape[-1]))
        mix, lam, y2 = None, 1.0, y
        if cfg.mixup_alpha > 0:
            x, (y, y2), lam = mixup_permuted(x, y, cfg.mixup_alpha, rng)
            mix = (y2, lam)
        logits = model.forward(x, train=True)
        if not np.all(np.isfinite(logits)):
            path = _dump_divergence(out, epoch, step, x, logits, model)
            raise TrainingDiverged(f"non-finite logits at epoch {epoch} step {step}; see {path}")
        loss, e = softmax_xent(logits, y, mix)
        if not np.isfinite(loss):
            path = _dump_divergence(out, epoch, step, x, logits, model)
            raise TrainingDiverged(f"NaN loss at epoch {epoch} step {step}; see {path}")
        model.backward(e)
        sgd_step(optim, model.parameters(), model.cfg)
        pred = np.argmax(logits, axis=1)
        loss_sum += loss * len(idx)
        hits += lam * np.sum(pred == y) + (1 - lam) * np.sum(pred == y2)
    return loss_sum / len(data), 100.0 * hits / len(data)


def train(cfg: TrainConfig, data: Optional[tuple[Dataset, Dataset]] = None) -> TrainResult:
    """Train per ``cfg``; writes ``metrics.csv``, ``last.ckpt``, ``best.ckpt`` and ``config.json`` to ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = data if data is not None else load_data(cfg)
    model = build_model(cfg, train_set)
    k_u = model.cfg.k_u if model.cfg is not None else 8
    optim = OptimState(cfg.lr, cfg.momentum, k_u, cfg.weight_decay, LRSchedule(cfg.lr, cfg.epochs))
    (out / "config.json").write_text(cfg.to_json())

    metrics_path = out / "metrics.csv"
    records: list[MetricsRecord] = []
    start = 0
    if cfg.resume and (out / "last.ckpt").exists():
        start = load_checkpoint(model, optim, out / "last.ckpt")["epoch"]
        records = _read_metrics(metrics_path)[:start]
    best = max((r.val_top1 for r in records), default=-1.0)
    _write_metrics(metrics_path, records)

    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        optim.set_epoch(epoch)
        loss, acc = train_epoch(model, optim, train_set, cfg, epoch, out)
        top1, top5 = evaluate(model, val_set)
        wall = time.perf_counter() - t0 if cfg.record_wall_time else 0.0
        rec = MetricsRecord(epoch, loss, acc, top1, top5, optim.lr, optim.pop_dead_fraction(), wall)
        records.append(rec)
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(rec.row())
        save_checkpoint(model, optim, out / "last.ckpt", epoch + 1)
        if top1 > best:
            best = top1
            save_checkpoint(model, optim, out / "best.ckpt", epoch + 1)
    return TrainResult(model, optim, records, out)


def load_trained(run_dir, which: str = "best") -> tuple[TrainConfig, Model]:
    """Rebuild the model of a finished run from its ``config.json`` and checkpoint."""
    run_dir = Path(run_dir)
    cfg = TrainConfig.from_json((run_dir / "config.json").read_text())
    train_set, _ = load_data(replace(cfg, subset=cfg.subset or 1))
    model = build_model(cfg, train_set)
    load_checkpoint(model, None, run_dir / f"{which}.ckpt")
    return cfg, model
