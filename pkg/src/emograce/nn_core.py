"""Numerical substrate: array kernels, deterministic init, parameter store,
and the binary checkpoint container.

All compute runs in float64; checkpoints store parameters as little-endian
float32 (training state arrays may be stored at float64, see CHECKPOINT_MAGIC
layout notes in the README).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .rng import stream_generator


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction) along `axis`."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("softmax of an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-12
) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + eps) + bias


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; smooth everywhere, which keeps finite differences honest
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) >= 2:
        return shape[0], shape[1]
    return shape[0], shape[0]


def seeded_init(shape: tuple[int, ...], scheme: str, seed: int) -> np.ndarray:
    """Deterministic parameter init.

    `uniform-scaled` draws U(-b, b) with b = sqrt(6 / (fan_in + fan_out));
    `zeros` and `ones` fill constants (ones exists for layer-norm gains).
    """
    if scheme == "zeros":
        return np.zeros(shape, dtype=np.float64)
    if scheme == "ones":
        return np.ones(shape, dtype=np.float64)
    if scheme == "uniform-scaled":
        fan_in, fan_out = _fans(tuple(shape))
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        gen = np.random.Generator(np.random.Philox(key=seed))
        return gen.uniform(-bound, bound, size=shape).astype(np.float64)
    raise ValueError(f"unknown init scheme {scheme!r}")


class ParamStore:
    """Named trainable parameters with matching gradient buffers."""

    def __init__(self) -> None:
        from .autodiff import Tensor  # local import: autodiff builds on this module

        self._tensor_cls = Tensor
        self._params: dict[str, "Tensor"] = {}

    def add(self, name: str, value: np.ndarray):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = self._tensor_cls(np.array(value, dtype=np.float64), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str):
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, "object"]]:
        return iter(self._params.items())

    def tensors(self) -> list["object"]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def total_size(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}"
                )
            p.data[...] = arr

CHECKPOINT_MAGIC = b"EMGRCKPT"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_checkpoint(
    path: str | Path, meta: dict, arrays: Mapping[str, np.ndarray]
) -> None:
    """Write the named-array container atomically (temp file + rename).

    Layout: magic, u32 version, u64 meta length + UTF-8 JSON meta, u32 entry
    count, then per entry u16 name length + name, u8 dtype tag (0=f32, 1=f64),
    u8 ndim, ndim x u32 dims, row-major little-endian payload.
    """
    path = Path(path)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", 1))
            fh.write(struct.pack("<Q", len(meta_bytes)))
            fh.write(meta_bytes)
            fh.write(struct.pack("<I", len(arrays)))
            for name, arr in arrays.items():
                tag = _DTYPE_TAGS.get(np.dtype(arr.dtype))
                if tag is None:
                    raise ValueError(f"unsupported checkpoint dtype {arr.dtype}")
                name_b = name.encode("utf-8")
                fh.write(struct.pack("<H", len(name_b)))
                fh.write(name_b)
                fh.write(struct.pack("<BB", tag, arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _DTYPES[tag]
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype)
            arrays[name] = data.reshape(shape).astype(np.float64)
    return meta, arrays


def dropout_mask(
    shape: tuple[int, ...], rate: float, rng: np.random.Generator
) -> np.ndarray:
    """Inverted-dropout scale mask: 0 with probability `rate`, else 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


__all__ = [
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "seeded_init",
    "ParamStore",
    "write_checkpoint",
    "read_checkpoint",
    "dropout_mask",
    "stream_generator",
]
