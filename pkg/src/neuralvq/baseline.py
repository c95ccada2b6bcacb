"""Classic quantizers: k-means, residual quantization, product quantization.

These serve three roles: baselines for accuracy comparisons, initializers
for the neural model, and exact reduction targets for its identity tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .ranking import greedy_pick, select_beam, sq_norms

logger = logging.getLogger(__name__)


def pairwise_sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared euclidean distances (n, k) via the inner-product expansion."""
    x = np.asarray(x, dtype=np.float32)
    c = np.asarray(c, dtype=np.float32)
    xn = (x * x).sum(axis=1, keepdims=True)
    cn = (c * c).sum(axis=1)
    return xn - 2.0 * (x @ c.T) + cn


def assign_nearest(x: np.ndarray, centroids: np.ndarray, chunk: int = 1 << 16) -> np.ndarray:
    """Index of the nearest centroid per row; exact ties go to the smaller index."""
    x = np.asarray(x, dtype=np.float32)
    c = np.asarray(centroids, dtype=np.float32)
    cn = (c * c).sum(axis=1)
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        part = x[s : s + chunk]
        # the per-row ||x||^2 term is constant under argmin and dropped
        d2 = cn - 2.0 * (part @ c.T)
        out[s : s + chunk] = np.argmin(d2, axis=1)
    return out


@dataclass
class KmeansResult:
    centroids: np.ndarray  # (k, d) float32
    objectives: list[float]  # mean squared distance at each assignment pass
    reseeds: list[tuple[int, int]] = field(default_factory=list)  # (iteration, cluster)
    requested_k: int = 0


def lloyd_kmeans(data: np.ndarray, k: int, iters: int = 25, seed: int = 0) -> KmeansResult:
    """Lloyd's k-means seeded from distinct data points.

    Empty clusters are re-seeded from the point currently farthest from its
    centroid (each re-seed consumes the next-farthest point). If fewer than
    k distinct points exist, k is reduced with a warning.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigError("lloyd_kmeans needs a non-empty (n, d) array")
    n = data.shape[0]
    requested_k = int(k)
    if requested_k < 1:
        raise ConfigError("k must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    seen: set[bytes] = set()
    seeds: list[int] = []
    for idx in perm:
        key = data[idx].tobytes()
        if key not in seen:
            seen.add(key)
            seeds.append(int(idx))
            if len(seeds) == requested_k:
                break
    k = len(seeds)
    if k < requested_k:
        logger.warning(
            "k-means: only %d distinct points for k=%d, shrinking codebook", k, requested_k
        )
    centroids = data[seeds].copy()

    objectives: list[float] = []
    reseeds: list[tuple[int, int]] = []
    for it in range(int(iters)):
        assign = assign_nearest(data, centroids)
        resid = data - centroids[assign]
        point_d2 = np.einsum("nd,nd->n", resid, resid, dtype=np.float64)
        objectives.append(float(point_d2.mean()))

        counts = np.bincount(assign, minlength=k)
        order = np.argsort(assign, kind="stable")
        bounds = np.zeros(k, dtype=np.int64)
        bounds[1:] = np.cumsum(counts)[:-1]
        nonempty = counts > 0
        sums = np.add.reduceat(data[order].astype(np.float64), bounds[nonempty], axis=0)
        centroids[nonempty] = (sums / counts[nonempty, None]).astype(np.float32)

        if not nonempty.all():
            d2 = point_d2.copy()
            for cluster in np.flatnonzero(~nonempty):
                far = int(np.argmax(d2))
                centroids[cluster] = data[far]
                d2[far] = -1.0
                reseeds.append((it, int(cluster)))
    return KmeansResult(centroids, objectives, reseeds, requested_k)


def kmeans(data: np.ndarray, k: int, iters: int = 25, seed: int = 0) -> np.ndarray:
    return lloyd_kmeans(data, k, iters, seed).centroids


@dataclass
class ResidualQuantizer:
    """Additive quantizer trained greedily on successive residuals."""

    codebooks: list[np.ndarray]  # each (k, d) float32
    beam_default: int = 1

    @property
    def m(self) -> int:
        return len(self.codebooks)

    @property
    def k(self) -> int:
        return self.codebooks[0].shape[0]

    @property
    def d(self) -> int:
        return self.codebooks[0].shape[1]

    @classmethod
    def train(
        cls,
        data: np.ndarray,
        m: int,
        k: int,
        iters: int = 25,
        seed: int = 0,
        beam_default: int = 1,
    ) -> "ResidualQuantizer":
        data = np.asarray(data, dtype=np.float32)
        if m < 1:
            raise ConfigError("residual quantizer needs m >= 1")
        resid = data.copy()
        books: list[np.ndarray] = []
        for step in range(int(m)):
            cb = kmeans(resid, k, iters=iters, seed=seed + step)
            books.append(cb)
            assign = assign_nearest(resid, cb)
            resid -= cb[assign]
        return cls(books, beam_default=beam_default)

    def encode(self, x: np.ndarray, beam: int | None = None, chunk: int = 4096) -> np.ndarray:
        """Beam-search encode; beam=1 is plain greedy assignment."""
        x = np.asarray(x, dtype=np.float32)
        beam = self.beam_default if beam is None else int(beam)
        if beam < 1:
            raise ConfigError("beam must be >= 1")
        n = x.shape[0]
        out = np.empty((n, self.m), dtype=np.int32)
        for s in range(0, n, chunk):
            out[s : s + chunk] = self._encode_chunk(x[s : s + chunk], beam)
        return out

    def _encode_chunk(self, x: np.ndarray, beam: int) -> np.ndarray:
        n = x.shape[0]
        if beam == 1:
            resid = x.copy()
            codes = np.empty((n, self.m), dtype=np.int32)
            for step, cb in enumerate(self.codebooks):
                # full loss per candidate, same arithmetic as the beam path,
                # so beam=1 and greedy agree bit-for-bit
                diff = resid[:, None, :] - cb[None, :, :]
                losses = sq_norms(diff)
                pick = greedy_pick(losses, np.arange(self.k, dtype=np.int64)[None, :])
                codes[:, step] = pick
                resid -= cb[pick]
            return codes

        resid = x[:, None, :].copy()  # (n, hyp, d)
        codes = np.zeros((n, 1, 0), dtype=np.int32)
        k = self.k
        for cb in self.codebooks:
            hyp = resid.shape[1]
            diff = resid[:, :, None, :] - cb[None, None, :, :]  # (n, hyp, k, d)
            losses = sq_norms(diff.reshape(n * hyp, k, x.shape[1])).reshape(n, hyp * k)
            cand = np.tile(np.arange(k, dtype=np.int32), hyp)[None, :].repeat(n, axis=0)
            parents = np.repeat(codes, k, axis=1)
            sel = select_beam(losses, parents, cand, beam)  # (n, b)
            rows = np.arange(n)[:, None]
            parent_idx = sel // k
            new_code = (sel % k).astype(np.int32)
            resid = diff[rows, parent_idx, sel % k]
            codes = np.concatenate(
                [codes[rows, parent_idx], new_code[:, :, None]], axis=2
            )
        return codes[:, 0, :]

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] > self.m:
            raise ConfigError(f"codes shape {codes.shape} does not fit m={self.m}")
        out = np.zeros((codes.shape[0], self.d), dtype=np.float32)
        for step in range(codes.shape[1]):
            out += self.codebooks[step][codes[:, step]]
        return out


def _sub_dims(d: int, m: int) -> list[int]:
    if m < 1 or m > d:
        raise ConfigError(f"product quantizer needs 1 <= m <= d, got m={m}, d={d}")
    base = d // m
    extra = d % m
    return [base + 1 if i < extra else base for i in range(m)]


@dataclass
class ProductQuantizer:
    """Independent k-means per contiguous sub-vector slice."""

    codebooks: list[np.ndarray]  # per slice, (k, sub_dim) float32
    sub_dims: list[int]

    @property
    def m(self) -> int:
        return len(self.codebooks)

    @property
    def d(self) -> int:
        return int(sum(self.sub_dims))

    @classmethod
    def train(
        cls, data: np.ndarray, m: int, k: int, iters: int = 25, seed: int = 0
    ) -> "ProductQuantizer":
        data = np.asarray(data, dtype=np.float32)
        dims = _sub_dims(data.shape[1], int(m))
        books = []
        at = 0
        for i, sd in enumerate(dims):
            books.append(kmeans(data[:, at : at + sd], k, iters=iters, seed=seed + i))
            at += sd
        return cls(books, dims)

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        out = np.empty((x.shape[0], self.m), dtype=np.int32)
        at = 0
        for i, sd in enumerate(self.sub_dims):
            out[:, i] = assign_nearest(x[:, at : at + sd], self.codebooks[i])
            at += sd
        return out

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        out = np.empty((codes.shape[0], self.d), dtype=np.float32)
        at = 0
        for i, sd in enumerate(self.sub_dims):
            out[:, at : at + sd] = self.codebooks[i][codes[:, i]]
            at += sd
        return out
