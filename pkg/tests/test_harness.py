import json
import sys
from dataclasses import replace

import numpy as np
import pytest

from eoq.harness import (CheckpointError, Dataset, DatasetError, SynthSpec, TrainConfig,
                         TrainingDiverged, augment, evaluate, load_checkpoint, load_cifar10,
                         mixup_batch, parse_cifar_batch, read_checkpoint, save_checkpoint,
                         synth_dataset, train)
from eoq.harness.checkpoint import checkpoint_bytes
from eoq.harness.cli import main
from eoq.harness.data import CIFAR_MEAN, CIFAR_STD, RECORD_BYTES, default_cifar_dir, standardize
from eoq.harness.train import METRICS_HEADER, build_model, load_data, topk_correct
from eoq.initopt import LRSchedule, OptimState
from eoq.network import BATCH_STATS
from eoq.quantcore import CALLS, BitWidthConfig
from eoq.tensorops import linear, linear_backward, softmax_xent

FAST = dict(blocks_per_stage=1, stage_channels=(4, 8, 8), batch_size=32, lr=0.05,
            synthetic=SynthSpec(n_train=128, n_val=64, size=8))


def fake_records(labels, rng):
    out = bytearray()
    for y in labels:
        out.append(y)
        out += rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
    return bytes(out)


def write_fake_cifar(d, rng, n=3):
    d.mkdir(parents=True, exist_ok=True)
    for i in range(1, 6):
        (d / f"data_batch_{i}.bin").write_bytes(fake_records(rng.integers(0, 10, n), rng))
    (d / "test_batch.bin").write_bytes(fake_records(rng.integers(0, 10, n), rng))


# --- data --------------------------------------------------------------------------------------------

def test_parse_cifar_batch(rng):
    raw = fake_records([3, 9], rng)
    imgs, labels = parse_cifar_batch(raw)
    assert imgs.shape == (2, 3, 32, 32) and labels.tolist() == [3, 9]
    # channel-major: the first 1024 pixel bytes are the red plane
    assert imgs[0, 0].ravel().tolist() == list(raw[1:1025])
    assert imgs[1, 2, 31, 31] == raw[2 * RECORD_BYTES - 1]


def test_parse_cifar_errors(rng):
    with pytest.raises(DatasetError, match="corrupt CIFAR-10 batch"):
        parse_cifar_batch(fake_records([1], rng)[:-1])
    bad = bytearray(fake_records([1], rng))
    bad[0] = 10
    with pytest.raises(DatasetError, match="corrupt CIFAR-10 batch"):
        parse_cifar_batch(bytes(bad))


def test_standardize_pixel_255():
    x = standardize(np.full((1, 3, 1, 1), 255, dtype=np.uint8))
    np.testing.assert_allclose(x.ravel(), (1.0 - CIFAR_MEAN) / CIFAR_STD, rtol=1e-6)


def test_load_fake_cifar(tmp_path, rng):
    write_fake_cifar(tmp_path / "cifar-10-batches-bin", rng)
    tr, te = load_cifar10(tmp_path)
    assert len(tr) == 15 and len(te) == 3
    assert tr.images.dtype == np.float32 and tr.labels.max() <= 9
    with pytest.raises(DatasetError):
        load_cifar10(tmp_path / "missing")


@pytest.mark.skipif(default_cifar_dir() is None, reason="EOQ_CIFAR10_DIR not set")
def test_real_cifar_sizes():
    tr, te = load_cifar10(default_cifar_dir())
    assert (len(tr), len(te)) == (50000, 10000)


def test_synth_deterministic_and_balanced():
    a, _ = synth_dataset(SynthSpec(n_train=64), seed=3)
    b, _ = synth_dataset(SynthSpec(n_train=64), seed=3)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    big, _ = synth_dataset(SynthSpec(n_train=100_000, n_val=1, num_classes=4, size=2), seed=0)
    priors = np.bincount(big.labels, minlength=4) / len(big)
    assert np.all(np.abs(priors - 0.25) <= 0.01 * 0.25 * 4)  # within one percentage point


def test_synth_separable_linear_model():
    tr, _ = synth_dataset(SynthSpec(n_train=256, num_classes=2, noise=0.0), seed=1)
    x = tr.images.reshape(len(tr), -1).astype(np.float64)
    w, b = np.zeros((2, x.shape[1])), np.zeros(2)
    for i in range(0, len(tr), 16):  # one epoch of SGD
        xb, yb = x[i:i + 16], tr.labels[i:i + 16]
        _, e = softmax_xent(linear(xb, w, b), yb)
        _, gw, gb = linear_backward(e, xb, w)
        w -= 0.5 * gw
        b -= 0.5 * gb
    acc = np.mean(np.argmax(linear(x, w, b), axis=1) == tr.labels)
    assert acc == 1.0


def test_augment_shapes_and_determinism():
    x = np.arange(2 * 3 * 8 * 8, dtype=np.float32).reshape(2, 3, 8, 8)
    a = augment(x, np.random.default_rng(0), pad=2)
    b = augment(x, np.random.default_rng(0), pad=2)
    assert a.shape == x.shape and np.array_equal(a, b)
    assert np.array_equal(augment(x, np.random.default_rng(0), pad=0)[:, :, :, ::-1].sum(), x.sum())


def test_mixup_examples(rng):
    x1, x2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    y1, y2 = np.arange(4), np.arange(4)[::-1]
    xm, (a, b), lam = mixup_batch(x1, y1, x2, y2, 0.7, lam=1.0)
    assert xm is x1 and a is y1 and lam == 1.0
    xm, _, _ = mixup_batch(x1, y1, -x1, y2, 0.7, lam=0.5)
    assert not xm.any()
    lams = np.random.default_rng(0).beta(0.7, 0.7, 100_000)
    assert abs(lams.mean() - 0.5) <= 0.005
    _, _, lam = mixup_batch(x1, y1, x2, y2, 0.7, seed=1)
    assert 0 <= lam <= 1
    with pytest.raises(ValueError):
        mixup_batch(x1, y1, x2, y2, 0.0)


def test_mixup_loss_blends_labels():
    z = np.array([[2.0, 0.0, -1.0]])
    l1, _ = softmax_xent(z, np.array([0]))
    l2, _ = softmax_xent(z, np.array([2]))
    lm, _ = softmax_xent(z, np.array([0]), (np.array([2]), 0.3))
    assert np.isclose(lm, 0.3 * l1 + 0.7 * l2)


# --- evaluation ------------------------------------------------------------------------------------------

class FixedLogits:
    def __init__(self, logits):
        self.logits = logits
        self.seen = 0

    def forward(self, x, train=True):
        assert train is False
        out = self.logits[self.seen:self.seen + len(x)]
        self.seen += len(x)
        return out


def test_evaluate_examples():
    y = np.repeat(np.arange(10), 10)
    data = Dataset(np.zeros((100, 1, 1, 1), np.float32), y, 10)
    assert evaluate(FixedLogits(np.eye(10)[y]), data, batch_size=7) == (100.0, 100.0)
    top1, top5 = evaluate(FixedLogits(np.zeros((100, 10))), data)
    assert (top1, top5) == (10.0, 50.0)


def test_topk_tie_break_and_order(rng):
    z = rng.standard_normal((50, 10))
    y = rng.integers(0, 10, 50)
    assert np.all(topk_correct(z, y, 5) >= topk_correct(z, y, 1))
    assert topk_correct(np.zeros((1, 4)), np.array([0]), 1)[0]
    assert not topk_correct(np.zeros((1, 4)), np.array([1]), 1)[0]


# --- checkpoints ---------------------------------------------------------------------------------------------

def _small_model(mode="eoq8"):
    cfg = TrainConfig(mode=mode, **FAST)
    tr, _ = load_data(cfg)
    return build_model(cfg, tr)


def test_checkpoint_roundtrip(tmp_path, rng):
    model = _small_model()
    opt = OptimState(lr=0.05)
    opt.buffers = {p.name: rng.standard_normal(p.data.shape) for p in model.parameters()}
    opt.step_count = 17
    save_checkpoint(model, opt, tmp_path / "a.ckpt", epoch=3)
    other = _small_model()
    for p in other.parameters():
        p.data = p.data * 0
    opt2 = OptimState(lr=0.05)
    ck = load_checkpoint(other, opt2, tmp_path / "a.ckpt")
    assert ck["epoch"] == 3 and opt2.step_count == 17
    for p, q in zip(model.parameters(), other.parameters()):
        assert np.array_equal(p.data, q.data) and p.data.dtype == q.data.dtype
    assert all(np.array_equal(opt.buffers[k], opt2.buffers[k]) for k in opt.buffers)
    save_checkpoint(other, opt2, tmp_path / "b.ckpt", epoch=3)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_stores_int16_numerators():
    ck = read_checkpoint(checkpoint_bytes(_small_model()))
    w = ck["records"]["param:stem.w"]
    assert w.numerators.dtype == np.int16 and w.grid_exp == 7 and w.bit_width == 8
    assert ck["bits"] == (8,) * 7


def test_checkpoint_bn_buffers_roundtrip(tmp_path, rng):
    model = _small_model("bn_float")
    for buf in model.buffers().values():
        buf[...] = rng.uniform(0.5, 2, buf.shape)
    save_checkpoint(model, None, tmp_path / "bn.ckpt")
    other = _small_model("bn_float")
    load_checkpoint(other, None, tmp_path / "bn.ckpt")
    for k, v in model.buffers().items():
        assert np.array_equal(v, other.buffers()[k])


def test_checkpoint_errors(tmp_path):
    model = _small_model()
    data = checkpoint_bytes(model)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(CheckpointError):
        read_checkpoint(data[:-10])
    with pytest.raises(CheckpointError):
        read_checkpoint(data[:20])
    flipped = bytearray(data)
    flipped[-20] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        read_checkpoint(bytes(flipped))
    (tmp_path / "m.ckpt").write_bytes(data)
    cfg = replace(TrainConfig(mode="custom", **FAST), bits=BitWidthConfig(k_w=6))
    tr, _ = load_data(cfg)
    with pytest.raises(CheckpointError, match="bit widths"):
        load_checkpoint(build_model(cfg, tr), None, tmp_path / "m.ckpt")


# --- training ----------------------------------------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(mixup_alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(mode="int4")
    cfg = TrainConfig(mode="custom", bits=BitWidthConfig(k_e=6))
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_fixup_float_synthetic_fits(tmp_path):
    cfg = TrainConfig(mode="fixup_float", blocks_per_stage=1, epochs=3, batch_size=32, lr=0.05,
                      out=str(tmp_path))
    res = train(cfg)
    assert res.records[-1].train_acc >= 99.0
    assert all(0 <= r.val_top1 <= r.val_top5 <= 100 for r in res.records)


def test_metrics_csv_and_schedule(tmp_path):
    cfg = TrainConfig(mode="eoq8", epochs=4, out=str(tmp_path), mixup_alpha=0.7, **FAST)
    res = train(cfg)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert len(lines) == 5
    sched = LRSchedule(cfg.lr, cfg.epochs)
    assert [r.lr for r in res.records] == [sched(e) for e in range(4)]
    np.testing.assert_allclose([float(l.split(",")[5]) for l in lines[1:]], [sched(e) for e in range(4)],
                               rtol=1e-6)
    assert all(0 <= r.dead_update_frac <= 1 for r in res.records)
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()


def test_training_is_deterministic(tmp_path):
    outs = []
    for run in ("a", "b"):
        cfg = TrainConfig(mode="eoq8", epochs=2, out=str(tmp_path / run), mixup_alpha=0.7,
                          augment=True, **FAST)
        train(cfg)
        outs.append(tmp_path / run)
    for name in ("metrics.csv", "last.ckpt", "best.ckpt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_resume_after_completion_is_noop(tmp_path):
    cfg = TrainConfig(mode="eoq8", epochs=2, out=str(tmp_path), **FAST)
    res = train(cfg)
    before = {n: (tmp_path / n).read_bytes() for n in ("metrics.csv", "last.ckpt")}
    again = train(replace(cfg, resume=True))
    assert [r.row() for r in again.records] == [r.row() for r in res.records]
    assert before == {n: (tmp_path / n).read_bytes() for n in before}


def test_resume_mid_schedule(tmp_path):
    full = TrainConfig(mode="eoq8", epochs=3, out=str(tmp_path / "full"), **FAST)
    train(full)
    # interrupt after epoch 1 by training a copy and rolling its checkpoint back
    run = replace(full, out=str(tmp_path / "run"))
    T = sys.modules["eoq.harness.train"]
    orig = T.train_epoch
    calls = {"n": 0}

    def stop_after_two(*a, **k):
        if calls["n"] == 2:
            raise KeyboardInterrupt
        calls["n"] += 1
        return orig(*a, **k)

    T.train_epoch = stop_after_two
    try:
        with pytest.raises(KeyboardInterrupt):
            train(run)
    finally:
        T.train_epoch = orig
    assert read_checkpoint((tmp_path / "run" / "last.ckpt").read_bytes())["epoch"] == 2
    train(replace(run, resume=True))
    for name in ("metrics.csv", "last.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "run" / name).read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_dump(tmp_path):
    cfg = TrainConfig(mode="fixup_float", epochs=2, out=str(tmp_path), **{**FAST, "lr": 50.0})
    with pytest.raises(TrainingDiverged):
        train(cfg)
    dump = json.loads((tmp_path / "divergence.json").read_text())
    assert {"epoch", "step", "input", "logits", "params"} <= set(dump)


def test_mode_isolation_during_training(tmp_path):
    CALLS.clear()
    train(TrainConfig(mode="bn_float", epochs=1, out=str(tmp_path / "bn"), **FAST))
    assert sum(CALLS.values()) == 0
    before = BATCH_STATS["bn"]
    train(TrainConfig(mode="eoq8", epochs=1, out=str(tmp_path / "eoq"), **FAST))
    assert BATCH_STATS["bn"] == before and CALLS["clamp"] > 0


def test_eoq_vs_float_first_step_diff_bounded(rng):
    q = _small_model("eoq8")
    f = _small_model("fixup_float")
    for pq, pf in zip(q.parameters(), f.parameters()):
        pf.data = pq.data.astype(np.float64)
    q.cast(np.float64)
    x = rng.integers(-8, 9, (4, 3, 8, 8)) / 128.0  # on the input grid
    hq = q.stem.forward(x, q.cfg)
    hf = f.stem.forward(x)
    assert hf.max() < 1 - 2.0**-7  # premise: no activation reaches the clamp
    assert np.max(np.abs(hq - hf)) <= 2.0**-8  # one Q_a1 rounding; relu is 1-Lipschitz
    u_q, u_f = q.blocks[0].units[0], f.blocks[0].units[0]
    u_q.forward(hq, q.cfg)
    u_f.forward(hq)
    assert np.max(np.abs(u_q.cache["x4"] - u_f.cache["x4"])) <= 2.0**-8


# --- CLI -------------------------------------------------------------------------------------------------------

def test_cli_memest(capsys):
    assert main(["memest", "--arch", "resnet18", "--batch-size", "128"]) == 0
    out = capsys.readouterr().out
    assert "eoq8" in out and "vanilla8" in out and "ratio" in out


def test_cli_probe(tmp_path, capsys):
    path = tmp_path / "p.csv"
    assert main(["probe", "--family", "fixup", "--L", "4", "--n-probes", "2", "--spatial", "8",
                 "--csv", str(path)]) == 0
    assert "expected 1.0625" in capsys.readouterr().out
    assert path.read_text().startswith("family,block_index")


def test_cli_train_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--synthetic", "--mode", "custom", "--kw", "6", "--ku", "7", "--epochs", "1",
                 "--batch-size", "64", "--lr", "0.05", "--blocks-per-stage", "1", "--mixup-alpha", "0.7",
                 "--seed", "4", "--out", str(out)]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["bits"]["k_w"] == 6 and cfg["bits"]["k_u"] == 7 and cfg["seed"] == 4
    assert main(["eval", str(out), "--which", "last"]) == 0
    assert "top1" in capsys.readouterr().out


def test_cli_requires_dataset(tmp_path, monkeypatch):
    monkeypatch.delenv("EOQ_CIFAR10_DIR", raising=False)
    with pytest.raises(SystemExit):
        main(["train", "--out", str(tmp_path)])
