"""Binary checkpoints and parameter transfer between models.

Layout (all integers little-endian)::

    b"FFCKPT01"
    u32 metadata length, UTF-8 ``key=value`` lines
    per tensor: u32 name length, name, u32 rank, u32 extents..., float32 values
    u32 tensor count

Tensor names carry a kind prefix: ``param:``, ``bn_mean:``, ``bn_var:``,
``adam_m:``, ``adam_v:`` and ``best:`` (best-so-far parameters kept for
resuming).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .graph import ModelGraph
from .optim import AdamState

MAGIC = b"FFCKPT01"
FORMAT_VERSION = "1"
VOLATILE_KEYS = ("created",)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: Dict[str, str] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def arch(self) -> str:
        return self.meta.get("arch", "")

    def hyper(self) -> Dict[str, str]:
        return {k[6:]: v for k, v in self.meta.items() if k.startswith("hyper.")}

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ":")}

    def params(self) -> Dict[str, np.ndarray]:
        return self.group("param")

    def has_optimizer(self) -> bool:
        return "adam.t" in self.meta

    def to_bytes(self) -> bytes:
        meta = "".join(f"{k}={v}\n" for k, v in self.meta.items()).encode("utf-8")
        parts = [MAGIC, struct.pack("<I", len(meta)), meta]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
            parts.append(a.tobytes())
        parts.append(struct.pack("<I", len(self.tensors)))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        pos = 0

        def take(n: int, what: str) -> bytes:
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at offset {pos}, {len(buf) - pos} left")
            out = buf[pos : pos + n]
            pos += n
            return out

        def u32(what: str) -> int:
            return struct.unpack("<I", take(4, what))[0]

        magic = take(len(MAGIC), "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at offset 0")
        meta_len = u32("metadata length")
        meta_start = pos
        try:
            text = take(meta_len, "metadata").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"metadata is not UTF-8 at offset {meta_start + exc.start}") from None
        meta: Dict[str, str] = {}
        for line in text.splitlines():
            if "=" not in line:
                raise CheckpointError(f"malformed metadata line {line!r} in block at offset {meta_start}")
            k, v = line.split("=", 1)
            meta[k] = v
        if meta.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r} (metadata at offset {meta_start})")
        tensors: Dict[str, np.ndarray] = {}
        while len(buf) - pos > 4:
            rec = pos
            name_len = u32("name length")
            if name_len > len(buf) - pos:
                raise CheckpointError(f"record at offset {rec}: name length {name_len} exceeds file")
            try:
                name = take(name_len, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"record at offset {rec}: name is not UTF-8") from None
            rank = u32("rank")
            if rank > 8:
                raise CheckpointError(f"record {name!r} at offset {rec}: implausible rank {rank}")
            shape = tuple(u32("extent") for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64))
            data = take(4 * count, f"values of {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
        footer_at = pos
        count = u32("record count footer")
        if count != len(tensors):
            raise CheckpointError(f"footer at offset {footer_at} says {count} records, found {len(tensors)}")
        return cls(meta, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def from_model(model: ModelGraph, meta: Optional[dict] = None, adam: Optional[AdamState] = None,
               params: Optional[Dict[str, np.ndarray]] = None, bn: Optional[dict] = None,
               extra: Optional[Dict[str, np.ndarray]] = None) -> Checkpoint:
    """Snapshot a model (or explicit parameter/BN arrays) into a checkpoint."""
    m = {"version": FORMAT_VERSION, "arch": model.arch}
    for k, v in model.hyper.items():
        m[f"hyper.{k}"] = _fmt(v)
    tensors: Dict[str, np.ndarray] = {}
    params = params if params is not None else {k: t.data for k, t in model.params.items()}
    bn = bn if bn is not None else {k: (s.running_mean, s.running_var, s.tracked) for k, s in model.bn_states.items()}
    for k, v in params.items():
        tensors[f"param:{k}"] = np.array(v, dtype=np.float32)
    tracked = []
    for k, (mean, var, was_tracked) in bn.items():
        tensors[f"bn_mean:{k}"] = np.array(mean, dtype=np.float32)
        tensors[f"bn_var:{k}"] = np.array(var, dtype=np.float32)
        if was_tracked:
            tracked.append(k)
    m["bn_tracked"] = ",".join(tracked)
    if adam is not None:
        m.update({"adam.alpha": _fmt(adam.alpha), "adam.beta1": _fmt(adam.beta1), "adam.beta2": _fmt(adam.beta2),
                  "adam.eps": _fmt(adam.eps), "adam.t": str(adam.t)})
        for k in adam.m:
            tensors[f"adam_m:{k}"] = np.array(adam.m[k], dtype=np.float32)
            tensors[f"adam_v:{k}"] = np.array(adam.v[k], dtype=np.float32)
    for k, v in (extra or {}).items():
        tensors[k] = np.array(v, dtype=np.float32)
    for k, v in (meta or {}).items():
        m[k] = _fmt(v)
    return Checkpoint(m, tensors)


def adam_from_checkpoint(ckpt: Checkpoint) -> AdamState:
    if not ckpt.has_optimizer():
        raise CheckpointError("checkpoint carries no optimizer state")
    mm = ckpt.meta
    return AdamState(
        alpha=float(mm["adam.alpha"]), beta1=float(mm["adam.beta1"]), beta2=float(mm["adam.beta2"]),
        eps=float(mm["adam.eps"]), t=int(mm["adam.t"]),
        m={k: v.copy() for k, v in ckpt.group("adam_m").items()},
        v={k: v.copy() for k, v in ckpt.group("adam_v").items()},
    )


def transfer(ckpt: Checkpoint, model: ModelGraph) -> None:
    """Copy every parameter and BN statistic of ``ckpt`` into ``model``.

    Nothing is copied unless architecture, hyperparameters, tensor names and
    shapes all match. Optimizer state is never transferred.
    """
    if ckpt.arch != model.arch:
        raise CheckpointError(f"architecture mismatch: checkpoint {ckpt.arch!r}, model {model.arch!r}")
    want = {k: _fmt(v) for k, v in model.hyper.items()}
    if ckpt.hyper() != want:
        raise CheckpointError(f"hyperparameter mismatch: checkpoint {ckpt.hyper()}, model {want}")
    params = ckpt.params()
    problems = []
    for name, t in model.params.items():
        if name not in params:
            problems.append(f"{name}: missing")
        elif params[name].shape != t.shape:
            problems.append(f"{name}: {params[name].shape} vs {t.shape}")
    problems += [f"{name}: unexpected" for name in params if name not in model.params]
    means, variances = ckpt.group("bn_mean"), ckpt.group("bn_var")
    for name, s in model.bn_states.items():
        if name not in means or means[name].shape != s.running_mean.shape or name not in variances:
            problems.append(f"{name}: batch-norm statistics missing or misshapen")
    if problems:
        raise CheckpointError("checkpoint does not match model: " + "; ".join(problems[:20]))
    tracked = set(filter(None, ckpt.meta.get("bn_tracked", "").split(",")))
    for name, t in model.params.items():
        t.data = params[name].astype(t.dtype, copy=True)
        t.grad = None
    for name, s in model.bn_states.items():
        s.running_mean = means[name].astype(s.running_mean.dtype, copy=True)
        s.running_var = variances[name].astype(s.running_var.dtype, copy=True)
        s.tracked = name in tracked
