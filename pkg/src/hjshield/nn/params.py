"""Named parameter collections, Adam, and the binary checkpoint format."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor


class ParameterSet:
    """Ordered mapping name -> leaf Tensor with gradient accumulators."""

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if k not in self._params:
                continue
            if self._params[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {self._params[k].shape} vs {np.shape(v)}")
            self._params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "ParameterSet":
        out = ParameterSet(self.seed)
        for k, t in self._params.items():
            out.add(k, t.data.copy())
        return out

    def polyak_update(self, source: "ParameterSet", tau: float) -> None:
        for k, t in self._params.items():
            t.data = (1.0 - tau) * t.data + tau * source[k].data

    def global_grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(self.grad(k) ** 2)) for k in self._params)))


class Adam:
    def __init__(self, params: ParameterSet, lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> float:
        norm = self.params.global_grad_norm()
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = self.params.grad(k) * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array([float(self.t)])}
        out.update({f"{prefix}/m/{k}": v.copy() for k, v in self.m.items()})
        out.update({f"{prefix}/v/{k}": v.copy() for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(state[f"{prefix}/t"][0])
        for k in self.m:
            self.m[k] = np.array(state[f"{prefix}/m/{k}"])
            self.v[k] = np.array(state[f"{prefix}/v/{k}"])


# -- checkpoint file ----------------------------------------------------------
# magic, format version, manifest (JSON), then per tensor:
# name length, name, ndim, shape, little-endian float64 data.

CKPT_MAGIC = b"HJCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(manifest, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shape
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        return _parse_checkpoint(raw, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(raw: bytes, path) -> tuple[dict[str, np.ndarray], dict]:
    version, mlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    manifest = json.loads(raw[off:off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors, manifest
