"""Fast approximate decoders fitted to a trained encoder's codes.

The neural decoder is exact but costs a network pass per step. For search
shortlists two cheaper families are fitted on (codes, vector) pairs:

- additive: one table per code position, reconstruction is a plain sum, so
  query inner products reduce to table lookups;
- pairwise additive: tables indexed by code *pairs* (i, j) via
  ci * k + cj, capturing cross-position interactions the additive family
  misses, while decoding stays a handful of lookups.

Pair selection is greedy: each round picks the pair whose fitted table
removes the most residual energy. For IVF indexes the coarse centroid is
folded in by quantizing the centroid table with a small residual quantizer
and treating its code columns like extra positions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .baseline import ResidualQuantizer, assign_nearest, kmeans
from .errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)


def pair_index(ci: np.ndarray, cj: np.ndarray, k: int) -> np.ndarray:
    """Flat table index of the code pair: ci * k + cj (0-based)."""
    return np.asarray(ci, dtype=np.int64) * k + np.asarray(cj, dtype=np.int64)


@dataclass
class AdditiveDecoder:
    """Per-position tables; reconstruction is the sum of addressed rows."""

    tables: np.ndarray  # (m, k, d) float32

    @property
    def m(self) -> int:
        return self.tables.shape[0]

    @property
    def k(self) -> int:
        return self.tables.shape[1]

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        out = np.zeros((codes.shape[0], self.tables.shape[2]), dtype=np.float32)
        for m in range(codes.shape[1]):
            out += self.tables[m][codes[:, m]]
        return out

    def luts(self, q: np.ndarray) -> np.ndarray:
        """Inner products <q, table row> per position: (m, k)."""
        return self.tables @ np.asarray(q, dtype=np.float32)

    def lut_sums(self, luts: np.ndarray, codes: np.ndarray) -> np.ndarray:
        total = np.zeros(codes.shape[0], dtype=np.float32)
        for m in range(codes.shape[1]):
            total += luts[m][codes[:, m]]
        return total


def _position_sums(codes: np.ndarray, x: np.ndarray, k: int, col: int) -> np.ndarray:
    """Sum of x rows per code value of one column, float64 (k, d)."""
    out = np.empty((k, x.shape[1]), dtype=np.float64)
    sel = codes[:, col]
    for j in range(x.shape[1]):
        out[:, j] = np.bincount(sel, weights=x[:, j], minlength=k)
    return out


def fit_additive_lstsq(
    codes: np.ndarray, x: np.ndarray, k: int, ridge: float | None = None
) -> AdditiveDecoder:
    """Joint least-squares fit of all position tables (normal equations).

    The one-hot design is rank-deficient for m >= 2 (per-position rows each
    sum to the all-ones column), so a ridge term is applied by default:
    ridge * n on the Gram diagonal with ridge = 1e-6. Pass ridge=0 to
    attempt an unregularized solve; a singular system then raises.
    """
    codes = np.asarray(codes)
    x = np.asarray(x, dtype=np.float32)
    n, m = codes.shape
    if n == 0 or m == 0:
        raise ConfigError("fit_additive_lstsq needs non-empty codes")
    cols = m * k
    gram = np.zeros((cols, cols), dtype=np.float64)
    for mi in range(m):
        for mj in range(mi, m):
            joint = np.bincount(
                pair_index(codes[:, mi], codes[:, mj], k), minlength=k * k
            ).reshape(k, k)
            gram[mi * k : (mi + 1) * k, mj * k : (mj + 1) * k] = joint
            if mj != mi:
                gram[mj * k : (mj + 1) * k, mi * k : (mi + 1) * k] = joint.T
    rhs = np.concatenate([_position_sums(codes, x, k, mi) for mi in range(m)], axis=0)
    lam = 1e-6 if ridge is None else float(ridge)
    if lam > 0:
        gram[np.diag_indices(cols)] += lam * n
    elif m >= 2:
        # per-position one-hot blocks each sum to the all-ones column, so
        # the Gram is singular by construction; LAPACK may "solve" it anyway
        raise NumericalError("singular normal equations in additive fit; pass ridge > 0")
    else:
        try:
            np.linalg.cholesky(gram)  # rejects unused codes (zero diagonal)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "singular normal equations in additive fit; pass ridge > 0"
            ) from exc
    sol = np.linalg.solve(gram, rhs)
    return AdditiveDecoder(sol.reshape(m, k, -1).astype(np.float32))


def fit_additive_sequential(codes: np.ndarray, x: np.ndarray, k: int) -> AdditiveDecoder:
    """Greedy per-position refit: each table is the mean of its residual group.

    Exact least squares for one position at a time on the running residual;
    the classic cheap upgrade of residual-quantizer codebooks to the codes
    actually in use.
    """
    codes = np.asarray(codes)
    x = np.asarray(x, dtype=np.float32)
    n, m = codes.shape
    resid = x.astype(np.float64)
    tables = np.zeros((m, k, x.shape[1]), dtype=np.float32)
    for mi in range(m):
        counts = np.bincount(codes[:, mi], minlength=k)
        sums = _position_sums(codes, resid, k, mi)
        means = np.zeros_like(sums)
        nz = counts > 0
        means[nz] = sums[nz] / counts[nz, None]
        tables[mi] = means.astype(np.float32)
        resid -= means[codes[:, mi]]
    return AdditiveDecoder(tables)


@dataclass
class PairwiseDecoder:
    """Tables addressed by code pairs; reconstruction sums the pair rows.

    positions is the extended code width T (model steps plus any folded
    coarse-centroid columns). Cells never seen during fitting decode to
    zero; decode counts such hits in unseen_hits for diagnostics.
    """

    pairs: list[tuple[int, int]]
    tables: list[np.ndarray]  # (k*k, d) float32, or (k, d) when i == j
    seen: list[np.ndarray]  # bool mask per table row
    k: int
    positions: int
    fit_mse: list[float] = field(default_factory=list)  # residual MSE after each pair
    unseen_hits: int = 0

    def _addr(self, codes: np.ndarray, pair: tuple[int, int]) -> np.ndarray:
        i, j = pair
        if i == j:
            return np.asarray(codes[:, i], dtype=np.int64)
        return pair_index(codes[:, i], codes[:, j], self.k)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.shape[1] != self.positions:
            raise ConfigError(
                f"pairwise decoder expects {self.positions} code columns, got {codes.shape[1]}"
            )
        d = self.tables[0].shape[1]
        out = np.zeros((codes.shape[0], d), dtype=np.float32)
        for pair, table, seen in zip(self.pairs, self.tables, self.seen):
            addr = self._addr(codes, pair)
            miss = ~seen[addr]
            if miss.any():
                self.unseen_hits += int(miss.sum())
                logger.debug("pairwise decode: %d unseen cell hits", int(miss.sum()))
            out += table[addr]
        return out


def _pair_candidates(positions: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(positions) for j in range(i, positions)]


def _cell_stats(addr: np.ndarray, resid: np.ndarray, size: int):
    """Per-cell counts and residual sums (float64) for one pair column."""
    counts = np.bincount(addr, minlength=size)
    sums = np.empty((size, resid.shape[1]), dtype=np.float64)
    for j in range(resid.shape[1]):
        sums[:, j] = np.bincount(addr, weights=resid[:, j], minlength=size)
    return counts, sums


def select_pairs_greedy(
    codes_ext: np.ndarray,
    x: np.ndarray,
    n_pairs: int,
    k: int,
    candidates: list[tuple[int, int]] | None = None,
) -> PairwiseDecoder:
    """Greedily pick pair tables that maximize the drop in residual energy.

    Each round scores every candidate pair (i, j), i <= j, by the exact
    least-squares gain of fitting group means on the current residual:
    sum over cells of ||residual sum||^2 / count. The best pair (ties to
    the lexicographically smallest) is fitted and subtracted; pairs may
    repeat across rounds. fit_mse records the residual MSE after each
    round, and the predicted gain equals the realized drop up to rounding.
    """
    codes_ext = np.asarray(codes_ext)
    x = np.asarray(x, dtype=np.float32)
    n, positions = codes_ext.shape
    if n == 0:
        raise ConfigError("select_pairs_greedy needs non-empty codes")
    cand = _pair_candidates(positions) if candidates is None else list(candidates)
    for i, j in cand:
        if not (0 <= i <= j < positions):
            raise ConfigError(f"invalid pair ({i}, {j}) for {positions} positions")
    addrs = {}
    for pair in cand:
        i, j = pair
        addrs[pair] = (
            np.asarray(codes_ext[:, i], dtype=np.int64)
            if i == j
            else pair_index(codes_ext[:, i], codes_ext[:, j], k)
        )
    resid = x.astype(np.float64)
    decoder = PairwiseDecoder([], [], [], k, positions)
    for _ in range(int(n_pairs)):
        best_pair = None
        best_gain = -np.inf
        for pair in cand:
            size = k if pair[0] == pair[1] else k * k
            counts, sums = _cell_stats(addrs[pair], resid, size)
            nz = counts > 0
            gain = float(((sums[nz] ** 2).sum(axis=1) / counts[nz]).sum())
            # strict > keeps the first maximum; candidates are enumerated in
            # lexicographic order, so ties resolve to the smallest pair
            if gain > best_gain:
                best_gain = gain
                best_pair = pair
        i, j = best_pair
        size = k if i == j else k * k
        counts, sums = _cell_stats(addrs[best_pair], resid, size)
        nz = counts > 0
        means = np.zeros_like(sums)
        means[nz] = sums[nz] / counts[nz, None]
        resid -= means[addrs[best_pair]]
        decoder.pairs.append(best_pair)
        decoder.tables.append(means.astype(np.float32))
        decoder.seen.append(nz)
        decoder.fit_mse.append(float((resid * resid).sum() / n))
    return decoder


def fit_pairs_fixed(
    codes_ext: np.ndarray, x: np.ndarray, pairs: list[tuple[int, int]], k: int
) -> PairwiseDecoder:
    """Fit a given pair list sequentially (group means on the running residual)."""
    codes_ext = np.asarray(codes_ext)
    x = np.asarray(x, dtype=np.float32)
    n, positions = codes_ext.shape
    decoder = PairwiseDecoder([], [], [], k, positions)
    resid = x.astype(np.float64)
    for pair in pairs:
        i, j = pair
        if not (0 <= i <= j < positions):
            raise ConfigError(f"invalid pair ({i}, {j}) for {positions} positions")
        addr = (
            np.asarray(codes_ext[:, i], dtype=np.int64)
            if i == j
            else pair_index(codes_ext[:, i], codes_ext[:, j], k)
        )
        size = k if i == j else k * k
        counts, sums = _cell_stats(addr, resid, size)
        nz = counts > 0
        means = np.zeros_like(sums)
        means[nz] = sums[nz] / counts[nz, None]
        resid -= means[addr]
        decoder.pairs.append(pair)
        decoder.tables.append(means.astype(np.float32))
        decoder.seen.append(nz)
        decoder.fit_mse.append(float((resid * resid).sum() / max(1, n)))
    return decoder


@dataclass
class IvfCentroidCodes:
    """Residual-quantized coarse centroids, used to fold IVF into pair tables."""

    codes: np.ndarray  # (n_centroids, m_tilde) int32
    rq: ResidualQuantizer
    rel_mse: float

    @property
    def m_tilde(self) -> int:
        return self.codes.shape[1]

    def expand(self, bucket_ids: np.ndarray) -> np.ndarray:
        return self.codes[np.asarray(bucket_ids)]


def quantize_ivf_centroids(
    centroids: np.ndarray,
    k: int,
    target_rel_mse: float = 1e-3,
    max_steps: int = 16,
    kmeans_iters: int = 25,
    seed: int = 0,
) -> IvfCentroidCodes:
    """Grow a residual quantizer over the centroid table until it is tight.

    Steps are added until the mean relative reconstruction error
    ||c - chat||^2 / ||c||^2 drops below target_rel_mse or max_steps is hit.
    """
    centroids = np.ascontiguousarray(centroids, dtype=np.float32)
    norms = np.maximum((centroids.astype(np.float64) ** 2).sum(axis=1), 1e-30)
    books: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    resid = centroids.copy()
    rel = float("inf")
    for _ in range(max_steps):
        cb = kmeans(resid, k, iters=kmeans_iters, seed=seed + len(books))
        assign = assign_nearest(resid, cb)
        resid = resid - cb[assign]
        books.append(cb)
        cols.append(assign.astype(np.int32))
        err = (resid.astype(np.float64) ** 2).sum(axis=1)
        rel = float((err / norms).mean())
        if rel < target_rel_mse:
            break
    rq = ResidualQuantizer(books)
    codes = np.stack(cols, axis=1)
    return IvfCentroidCodes(codes, rq, rel)
