"""Dataset I/O, normalization, splits, and synthetic benchmark data.

Vectors are carried as row-major float32 arrays of shape (n, d) throughout
the library. On disk the classic vecs container family is used: every record
is a little-endian int32 dimension header followed by the payload (float32
for .fvecs, uint8 for .bvecs, int32 for .ivecs).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

_PAYLOAD_DTYPES = {
    "fvecs": np.dtype("<f4"),
    "bvecs": np.dtype("u1"),
    "ivecs": np.dtype("<i4"),
}


def _format_for(path: str, fmt: str | None) -> str:
    if fmt is None:
        fmt = os.path.splitext(str(path))[1].lstrip(".").lower()
    if fmt not in _PAYLOAD_DTYPES:
        raise ConfigError(
            f"unknown vector container format {fmt!r} for {path!r}; "
            "expected one of fvecs, bvecs, ivecs"
        )
    return fmt


def read_vecs(path: str, fmt: str | None = None, limit: int | None = None) -> np.ndarray:
    """Read a vecs container into a (n, d) array.

    fvecs and bvecs are returned as float32 (bvecs widened exactly),
    ivecs as int32. fmt defaults to the file suffix. With limit set, at
    most that many leading records are read and anything past them is
    not validated.
    """
    fmt = _format_for(path, fmt)
    payload = _PAYLOAD_DTYPES[fmt]
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        empty = np.empty((0, 0), dtype=np.int32 if fmt == "ivecs" else np.float32)
        return empty
    if raw.size < 4:
        raise DataFormatError(f"{path}: truncated record header at byte offset 0")
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise DataFormatError(f"{path}: invalid dimension {dim} at byte offset 0")
    record = 4 + dim * payload.itemsize
    n_complete = raw.size // record
    tail = raw.size - n_complete * record
    n_read = n_complete if limit is None else min(int(limit), n_complete)

    body = raw[: n_read * record].reshape(n_read, record)
    dims = np.ascontiguousarray(body[:, :4]).view("<i4").ravel()
    bad = np.flatnonzero(dims != dim)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f"{path}: inconsistent dimension at record {i} "
            f"(byte offset {i * record}): got {int(dims[i])}, expected {dim}"
        )
    if limit is None or n_read == n_complete:
        if tail:
            off = n_complete * record
            if tail >= 4:
                tail_dim = int(raw[off : off + 4].view("<i4")[0])
                if tail_dim != dim:
                    raise DataFormatError(
                        f"{path}: inconsistent dimension at record {n_complete} "
                        f"(byte offset {off}): got {tail_dim}, expected {dim}"
                    )
            raise DataFormatError(f"{path}: truncated record at byte offset {off}")
    data = np.ascontiguousarray(body[:, 4:]).view(payload).reshape(n_read, dim)
    if fmt == "ivecs":
        return data.astype(np.int32, copy=False)
    out = data.astype(np.float32)
    if fmt == "fvecs" and not np.isfinite(out).all():
        raise DataFormatError(f"{path}: non-finite entries in float payload")
    return out


def write_vecs(path: str, data: np.ndarray, fmt: str | None = None) -> None:
    """Write a (n, d) array as a vecs container (see read_vecs)."""
    fmt = _format_for(path, fmt)
    payload = _PAYLOAD_DTYPES[fmt]
    data = np.asarray(data)
    if data.ndim != 2:
        raise ConfigError(f"write_vecs expects a 2-d array, got shape {data.shape}")
    n, d = data.shape
    if n > 0 and d == 0:
        raise ConfigError("write_vecs: records must have at least one dimension")
    if fmt == "bvecs":
        arr = np.asarray(data)
        if arr.dtype.kind == "f":
            if not np.all((arr >= 0) & (arr <= 255) & (arr == np.floor(arr))):
                raise ConfigError("bvecs payload must be integral values in [0, 255]")
        body = arr.astype(payload)
    elif fmt == "ivecs":
        body = data.astype("<i4")
    else:
        body = data.astype("<f4")
    record = 4 + d * payload.itemsize
    buf = np.empty((n, record), dtype=np.uint8)
    buf[:, :4] = np.frombuffer(np.int32(d).astype("<i4").tobytes(), dtype=np.uint8)
    buf[:, 4:] = body.view(np.uint8).reshape(n, d * payload.itemsize)
    buf.tofile(path)


@dataclass
class NormStats:
    """Per-feature mean and a single pooled scale shared by all features."""

    mean: np.ndarray  # (d,) float32
    scale: float

    def as_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float32), float(d["scale"]))


def fit_norm(train: np.ndarray) -> NormStats:
    """Fit per-feature means and one pooled standard deviation.

    The pooled scale is the std of all centered entries taken together
    (ddof=0), clamped to at least 1e-12 so constant inputs stay usable.
    """
    train = np.asarray(train, dtype=np.float32)
    if train.ndim != 2 or train.shape[0] < 2:
        raise ConfigError("fit_norm needs at least 2 vectors")
    mean64 = train.mean(axis=0, dtype=np.float64)
    centered = train - mean64
    scale = float(np.sqrt(np.mean(centered.astype(np.float64) ** 2)))
    return NormStats(mean=mean64.astype(np.float32), scale=max(scale, 1e-12))


def apply_norm(x: np.ndarray, stats: NormStats, direction: str = "forward") -> np.ndarray:
    """Apply (forward) or undo (inverse) normalization; returns float32."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != stats.mean.shape[0]:
        raise ConfigError(
            f"dimension mismatch: data has d={x.shape[-1]}, stats have d={stats.mean.shape[0]}"
        )
    scale = np.float32(stats.scale)
    if direction == "forward":
        return (x - stats.mean) / scale
    if direction == "inverse":
        return x * scale + stats.mean
    raise ConfigError(f"unknown normalization direction {direction!r}")


def synth_gmm(
    seed: int,
    n: int,
    d: int,
    components: int = 256,
    spread: float = 0.1,
) -> np.ndarray:
    """Sample a Gaussian-mixture benchmark set, reproducible from the seed.

    Component means are standard normal, each component has isotropic std
    `spread`, and mixture weights are uniform. Returns float32 (n, d).
    """
    if n < 0 or d <= 0 or components <= 0:
        raise ConfigError("synth_gmm needs n >= 0, d >= 1, components >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    means = rng.standard_normal((components, d))
    which = rng.integers(0, components, size=n)
    x = means[which] + spread * rng.standard_normal((n, d))
    return x.astype(np.float32)


def split(x: np.ndarray, sizes: list[int], seed: int) -> list[np.ndarray]:
    """Cut a seeded permutation of the rows into consecutive disjoint parts."""
    x = np.asarray(x)
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes):
        raise ConfigError("split sizes must be non-negative")
    total = sum(sizes)
    if total > x.shape[0]:
        raise ConfigError(f"split sizes sum to {total} but only {x.shape[0]} rows exist")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(x.shape[0])
    parts = []
    at = 0
    for s in sizes:
        parts.append(x[perm[at : at + s]])
        at += s
    return parts
