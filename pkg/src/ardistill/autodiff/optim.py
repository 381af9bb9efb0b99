"""Parameter containers, SGD/Adam, EMA shadows and checkpoint files."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"ARDCKPT\x00"
CHECKPOINT_VERSION = 1


class ParamSet:
    """Named, insertion-ordered collection of trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, pid: str, value: np.ndarray) -> Tensor:
        if pid in self._params:
            raise KeyError(f"duplicate parameter id {pid!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=pid)
        self._params[pid] = t
        return t

    def __getitem__(self, pid: str) -> Tensor:
        return self._params[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k!r} in state")
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ShapeError(f"parameter {k!r}: shape {v.shape} != {t.shape}")
            t.data = v.copy()

    def num_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.values for t in self._params.values()])


class Optimizer:
    def __init__(self, lr: float):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.t = 0

    def step(self, params: ParamSet) -> None:
        for pid, p in params.items():
            if p.grad is None:
                raise ValueError(f"parameter {pid!r} has no gradient")
        self.t += 1
        for pid, p in params.items():
            self._update(pid, p)
            p.grad = None

    def _update(self, pid: str, p: Tensor) -> None:  # pragma: no cover
        raise NotImplementedError

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state: dict[str, np.ndarray], t: int) -> None:
        self.t = t


class SGD(Optimizer):
    def _update(self, pid, p):
        p.data = p.data - self.lr * p.grad


class Adam(Optimizer):
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _update(self, pid, p):
        g = p.grad
        m = self.m.get(pid)
        if m is None:
            m = self.m[pid] = np.zeros_like(g)
            self.v[pid] = np.zeros_like(g)
        v = self.v[pid]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        mhat = m / (1 - self.beta1**self.t)
        vhat = v / (1 - self.beta2**self.t)
        p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        out = {}
        for pid in self.m:
            out[f"m/{pid}"] = self.m[pid]
            out[f"v/{pid}"] = self.v[pid]
        return out

    def load_state(self, state, t):
        self.t = t
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v/")}


def make_optimizer(name: str, lr: float, **kw) -> Optimizer:
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr, **kw)
    raise ValueError(f"unknown optimizer {name!r}; expected 'sgd' or 'adam'")


def opt_step(params: ParamSet, optimizer: Optimizer) -> ParamSet:
    optimizer.step(params)
    return params


@dataclass
class EmaParamSet:
    """Exponential moving average of a ParamSet; never receives gradients."""

    decay: float
    shadow: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0 and self.decay != 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def from_params(cls, params: ParamSet, decay: float) -> EmaParamSet:
        return cls(decay, params.state())

    def update(self, source: ParamSet) -> None:
        b = self.decay
        for pid, t in source.items():
            if pid not in self.shadow:
                raise KeyError(f"EMA has no shadow for {pid!r}")
            if self.shadow[pid].shape != t.shape:
                raise ShapeError(f"EMA shadow {pid!r}: {self.shadow[pid].shape} vs source {t.shape}")
            self.shadow[pid] = b * self.shadow[pid] + (1.0 - b) * t.data


def ema_update(ema: EmaParamSet, source: ParamSet) -> EmaParamSet:
    ema.update(source)
    return ema


# -- checkpoint container ---------------------------------------------------
#
#   magic   8 bytes  b"ARDCKPT\0"
#   version u32 LE
#   hlen    u64 LE   length of the UTF-8 JSON header
#   header  JSON     {"meta": {...}, "arrays": [{"id", "shape", "offset", "count"}, ...]}
#   payload f64 LE   arrays back to back, row-major
def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> int:
    entries, offset = [], 0
    for key, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"id": key, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for arr in arrays.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return len(data)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen])
    payload = np.frombuffer(raw[20 + hlen :], dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        seg = payload[e["offset"] : e["offset"] + e["count"]]
        arrays[e["id"]] = seg.astype(np.float64).reshape(e["shape"])
    return arrays, header["meta"]


def save_checkpoint(path, params: ParamSet, optimizer: Optimizer | None = None, meta: dict | None = None) -> int:
    arrays = {f"param/{k}": v for k, v in params.state().items()}
    meta = dict(meta or {})
    if optimizer is not None:
        arrays.update({f"opt/{k}": v for k, v in optimizer.state().items()})
        meta["opt_step"] = optimizer.t
        meta["opt_kind"] = type(optimizer).__name__.lower()
    return save_arrays(path, arrays, meta)


def load_checkpoint(path, params: ParamSet, optimizer: Optimizer | None = None) -> dict:
    arrays, meta = load_arrays(path)
    params.load_state({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    if optimizer is not None and "opt_step" in meta:
        optimizer.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}, meta["opt_step"])
    return meta
