"""Learnable parameter storage and the checkpoint file format.

A `ParameterSet` is an ordered mapping from array names to float64 numpy
arrays. The point MLP is stored as one flat vector (per-layer weights then
biases, layers in order) so optimizer state and finite-difference probes
can index parameters by (name, flat offset) uniformly.

Checkpoints store named float32 arrays with shape metadata; anything the
caller passes (optimizer moments, step counters) rides along unchanged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import FormatError, ShapeMismatch

CHECKPOINT_MAGIC = b"RAYBEV.CHECKPT\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass
class ParameterSet:
    """Named float64 arrays, iteration order fixed at construction."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> Iterator[str]:
        return iter(self.arrays)

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet({k: np.zeros_like(v) for k, v in self.arrays.items()})

    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def require(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in self.arrays:
            raise ShapeMismatch(f"parameter set is missing array '{name}'")
        arr = self.arrays[name]
        if arr.shape != shape:
            raise ShapeMismatch(f"parameter '{name}' has shape {arr.shape}, expected {shape}")
        return arr


def mlp_param_count(widths) -> int:
    return int(sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1)))


def init_mlp_flat(widths, rng: np.random.Generator) -> np.ndarray:
    """Flat MLP parameters: N(0, 1/sqrt(fan_in)) weights, zero biases."""
    chunks = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        chunks.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays as little-endian float32 with shape metadata."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<2I", CHECKPOINT_VERSION, len(arrays)))
        for name, value in arrays.items():
            # asarray keeps 0-d arrays 0-d; ascontiguousarray would promote them.
            arr = np.asarray(value, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into float64 arrays, preserving file order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<2I", raw, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            off += 4 * n
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: truncated checkpoint entry: {exc}") from exc
        out[name] = data.astype(np.float64).reshape(shape)
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after last entry")
    return out
