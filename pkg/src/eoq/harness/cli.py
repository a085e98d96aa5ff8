"""Command line: ``eoq train | eval | probe | memest``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from ..diagnostics import MODES as MEM_MODES
from ..diagnostics import isometry_sweep, memory_estimate, write_sweep_csv
from ..network import resnet18_imagenet_arch, resnet20_arch
from ..quantcore import BitWidthConfig
from .data import SynthSpec, default_cifar_dir
from .train import MODES, TrainConfig, evaluate, load_data, load_trained, train

_BITS = [("kw", "k_w"), ("ka", "k_a"), ("kb", "k_b"), ("kgamma", "k_gamma"),
         ("ke", "k_e"), ("kg", "k_g"), ("ku", "k_u")]


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, default="eoq8")
    for flag, _ in _BITS:
        p.add_argument(f"--{flag}", type=int, default=8, help="bit width (mode custom)")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--mixup-alpha", type=float, default=0.0, help="0 disables mixup")
    p.add_argument("--blocks-per-stage", type=int, default=3)
    p.add_argument("--data", help="directory with the CIFAR-10 binary batches")
    p.add_argument("--synthetic", action="store_true", help="train on the synthetic blob dataset")
    p.add_argument("--subset", type=int, help="use only the first N training samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/default")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--wall-time", action="store_true", help="record wall seconds in metrics.csv")


def config_from_args(a) -> TrainConfig:
    data = None
    if not a.synthetic:
        data = a.data or default_cifar_dir()
        if data is None:
            raise SystemExit("no dataset: pass --data DIR, set EOQ_CIFAR10_DIR, or use --synthetic")
    bits = BitWidthConfig(**{field: getattr(a, flag) for flag, field in _BITS})
    return TrainConfig(mode=a.mode, blocks_per_stage=a.blocks_per_stage, data=str(data) if data else None,
                       synthetic=SynthSpec(), subset=a.subset, batch_size=a.batch_size, epochs=a.epochs,
                       lr=a.lr, momentum=a.momentum, weight_decay=a.weight_decay,
                       mixup_alpha=a.mixup_alpha, bits=bits, seed=a.seed, out=a.out,
                       resume=a.resume, record_wall_time=a.wall_time)


def cmd_train(a) -> int:
    cfg = config_from_args(a)
    res = train(cfg)
    for r in res.records:
        print(f"epoch {r.epoch:3d}  loss {r.train_loss:.4f}  train {r.train_acc:6.2f}  "
              f"val {r.val_top1:6.2f}/{r.val_top5:6.2f}  lr {r.lr:.4g}  dead {r.dead_update_frac:.3f}")
    print(f"wrote {res.out}/metrics.csv")
    return 0


def cmd_eval(a) -> int:
    cfg, model = load_trained(a.run, a.which)
    if a.data:
        cfg = replace(cfg, data=a.data)
    _, val = load_data(cfg)
    top1, top5 = evaluate(model, val)
    print(f"top1 {top1:.2f}  top5 {top5:.2f}  ({len(val)} samples)")
    return 0


def cmd_probe(a) -> int:
    rows = []
    for fam in a.family:
        rows += isometry_sweep(fam, a.L, n_probes=a.n_probes, m=a.m, spatial=a.spatial)
    for r in rows:
        print(f"{r.family:8s} L={r.L:<4d} m={r.m}  measured {r.measured:.4f} +- {r.std_err:.4f}  "
              f"expected {r.expected:.4f}")
    if a.csv:
        write_sweep_csv(rows, a.csv)
    return 0


def cmd_memest(a) -> int:
    arch = resnet18_imagenet_arch() if a.arch == "resnet18" else resnet20_arch(a.blocks_per_stage)
    base = memory_estimate(arch, a.batch_size, "vanilla32").total_bytes
    for mode in MEM_MODES:
        rep = memory_estimate(arch, a.batch_size, mode)
        print(f"{mode:10s} weights {rep.weights_bytes / 2**20:9.2f} MB  acts {rep.activations_bytes / 2**20:9.2f} MB  "
              f"optim {rep.optimizer_bytes / 2**20:9.2f} MB  total {rep.total_mb:9.2f} MB  "
              f"ratio {rep.total_bytes / base:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eoq", description="8-bit integer training of Fixup ResNets")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train a model and write metrics and checkpoints")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run on its validation set")
    p.add_argument("run", help="run directory (holds config.json and checkpoints)")
    p.add_argument("--which", choices=["best", "last"], default="best")
    p.add_argument("--data", help="override the dataset directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="block Jacobian trace at initialization")
    p.add_argument("--family", nargs="+", choices=["fixup", "control", "bn"], default=["fixup"])
    p.add_argument("--L", type=int, nargs="+", default=[4, 16, 64])
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--n-probes", type=int, default=32)
    p.add_argument("--spatial", type=int, default=32)
    p.add_argument("--csv", help="also write the rows to this CSV file")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("memest", help="analytic training-memory estimate")
    p.add_argument("--arch", choices=["resnet18", "resnet20"], default="resnet18")
    p.add_argument("--blocks-per-stage", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=128)
    p.set_defaults(func=cmd_memest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
