"""Binary checkpoint container.

Layout (little-endian)::

    magic   4s   b"EOQ1"
    version u16
    quant   u8   1 if bit widths follow a quantized model, else 0
    bits    7*u8 k_w k_a k_b k_gamma k_e k_g k_u (zeros for float models)
    epoch   u32
    step    u64
    lr      f64
    n_rec   u32
    records ...
    crc32   u32  over everything before it

A record is ``name_len u16, name utf-8, tag u8, ndim u8, dims u32*ndim`` then,
for ``tag == 0`` (grid tensor), ``grid_exp i16, scale_exp i16, bit_width u8``
and int16 numerators; for ``tag == 1`` (real tensor) float64 values.
Names are prefixed ``param:``, ``buffer:`` (BN running statistics) or
``momentum:`` (optimizer state).
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from ..initopt import OptimState
from ..network import Model
from ..quantcore import BitWidthConfig, QTensor, dequantize

MAGIC = b"EOQ1"
VERSION = 1
_HEAD = struct.Struct("<4sHB7BIQdI")
_GRID, _REAL = 0, 1


class CheckpointError(ValueError):
    pass


def _pack_record(name: str, value) -> bytes:
    raw = name.encode()
    if isinstance(value, QTensor):
        num = value.numerators
        if num.size and np.max(np.abs(num.astype(np.int64))) > 2**15 - 1:
            raise CheckpointError(f"{name}: numerators do not fit int16")
        head = struct.pack(f"<H{len(raw)}sBB{num.ndim}I", len(raw), raw, _GRID, num.ndim, *num.shape)
        head += struct.pack("<hhB", value.grid_exp, value.scale_exp, value.bit_width)
        return head + num.astype("<i2").tobytes()
    arr = np.asarray(value, dtype="<f8")
    head = struct.pack(f"<H{len(raw)}sBB{arr.ndim}I", len(raw), raw, _REAL, arr.ndim, *arr.shape)
    return head + arr.tobytes()


def _records(model: Model, optim: Optional[OptimState]):
    for p in model.parameters():
        if model.cfg is not None and p.quantized:
            yield f"param:{p.name}", p.storage_quant(p.data, model.cfg)
        else:
            yield f"param:{p.name}", p.data
    for name, buf in model.buffers().items():
        yield f"buffer:{name}", buf
    if optim is not None:
        for name in sorted(optim.buffers):
            yield f"momentum:{name}", optim.buffers[name]


def checkpoint_bytes(model: Model, optim: Optional[OptimState] = None, epoch: int = 0) -> bytes:
    cfg = model.cfg
    bits = cfg.as_tuple() if cfg is not None else (0,) * 7
    recs = list(_records(model, optim))
    body = _HEAD.pack(MAGIC, VERSION, int(cfg is not None), *bits, epoch,
                      optim.step_count if optim else 0, optim.lr if optim else 0.0, len(recs))
    body += b"".join(_pack_record(n, v) for n, v in recs)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, optim: Optional[OptimState], path, epoch: int = 0) -> None:
    data = checkpoint_bytes(model, optim, epoch)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def array(self, dtype: str, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        size = n * np.dtype(dtype).itemsize
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(self.data, dtype=dtype, count=n, offset=self.pos).reshape(shape)
        self.pos += size
        return arr


def read_checkpoint(data: bytes) -> dict:
    """Parse a checkpoint into ``{"bits", "epoch", "step", "lr", "records"}``."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("not an EOQ checkpoint (bad magic)")
    if len(data) < _HEAD.size + 4:
        raise CheckpointError("truncated checkpoint")
    r = _Reader(data[:-4])
    magic, version, quant, *rest = r.take(_HEAD.format)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    bits, (epoch, step, lr, n_rec) = tuple(rest[:7]), rest[7:]
    records = {}
    for _ in range(n_rec):
        (nlen,) = r.take("<H")
        (raw,) = r.take(f"<{nlen}s")
        tag, ndim = r.take("<BB")
        shape = r.take(f"<{ndim}I") if ndim else ()
        if tag == _GRID:
            g, s, k = r.take("<hhB")
            records[raw.decode()] = QTensor(r.array("<i2", shape).astype(np.int16), g, k, s)
        elif tag == _REAL:
            records[raw.decode()] = r.array("<f8", shape).copy()
        else:
            raise CheckpointError(f"unknown record tag {tag}")
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after the last record")
    (crc,) = struct.unpack("<I", data[-4:])
    if crc != zlib.crc32(data[:-4]):
        raise CheckpointError("checksum mismatch (truncated or corrupted checkpoint)")
    return {"bits": bits if quant else None, "epoch": epoch, "step": step, "lr": lr, "records": records}


def load_checkpoint(model: Model, optim: Optional[OptimState], path) -> dict:
    """Restore parameters, BN statistics and momentum in place; returns the header fields."""
    ck = read_checkpoint(Path(path).read_bytes())
    want = model.cfg.as_tuple() if model.cfg is not None else None
    if ck["bits"] != want:
        raise CheckpointError(f"bit widths in checkpoint {ck['bits']} do not match the model {want}")
    recs = ck["records"]
    for p in model.parameters():
        key = f"param:{p.name}"
        if key not in recs:
            raise CheckpointError(f"checkpoint is missing {p.name}")
        val = recs[key]
        arr = dequantize(val) if isinstance(val, QTensor) else val
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{p.name}: shape {arr.shape} does not match {p.data.shape}")
        p.data = arr.astype(model.dtype)
    for name, buf in model.buffers().items():
        buf[...] = recs[f"buffer:{name}"]
    if optim is not None:
        optim.buffers = {k[len("momentum:"):]: v for k, v in recs.items() if k.startswith("momentum:")}
        optim.step_count = ck["step"]
        optim.lr = ck["lr"] or optim.lr
    return ck


def bitwidths_of(ck: dict) -> Optional[BitWidthConfig]:
    return BitWidthConfig(*ck["bits"]) if ck["bits"] else None
