"""Shared selection helpers with exact, documented tie-breaking.

Beam search and shortlist stages all reduce to "pick the best few by score,
break exact ties deterministically". Both the residual-quantizer baseline
and the neural model route their selections through select_beam so that
reduction identities hold bit-for-bit.
"""

from __future__ import annotations

import numpy as np


def sq_norms(diff: np.ndarray) -> np.ndarray:
    """Squared l2 norm over the last axis of a (rows, cand, d) array.

    Both the residual-quantizer baseline and the neural encoder compute
    their candidate losses through this one call so that, given bitwise
    equal inputs, their selections agree bit-for-bit.
    """
    return np.einsum("rkd,rkd->rk", diff, diff)


def greedy_pick(losses: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Per-row argmin over candidates; exact ties go to the smallest code value.

    codes holds the candidate code value of each column (broadcastable to
    the shape of losses). Matches the tie rule select_beam applies with a
    single hypothesis, so greedy and beam=1 encoders agree exactly.
    """
    best = losses.min(axis=1, keepdims=True)
    masked = np.where(losses == best, codes, np.iinfo(np.int64).max)
    return masked.min(axis=1)


def topk_by_score(scores: np.ndarray, k: int, ids: np.ndarray | None = None) -> np.ndarray:
    """Indices of the k smallest scores; exact ties go to the smaller id.

    scores is 1-d. ids defaults to positional indices. Returned indices are
    positions into scores, ordered by (score, id) ascending.
    """
    scores = np.asarray(scores)
    k = min(int(k), scores.shape[0])
    if ids is None:
        # stable sort on score alone ties by position
        order = np.argsort(scores, kind="stable")
    else:
        order = np.lexsort((np.asarray(ids), scores))
    return order[:k]


def top_a_stable(scores: np.ndarray, a: int) -> np.ndarray:
    """Per-row indices of the a smallest scores, ordered by (score, index).

    Equivalent to a stable argsort truncated to a columns, but computed with
    a partition plus a sort of the kept columns. Exact ties straddling the
    cut would let the partition pick arbitrary members, so those rows fall
    back to the full stable sort.
    """
    scores = np.asarray(scores)
    n, k = scores.shape
    a = min(int(a), k)
    if a >= k:
        return np.argsort(scores, axis=1, kind="stable")
    part = np.argpartition(scores, a - 1, axis=1)[:, :a]
    vals = np.take_along_axis(scores, part, axis=1)
    order = np.lexsort((part, vals), axis=-1)
    sel = np.take_along_axis(part, order, axis=1)
    selv = np.take_along_axis(vals, order, axis=1)
    vmax = selv[:, -1:]
    amb = np.count_nonzero(scores == vmax, axis=1) != np.count_nonzero(selv == vmax, axis=1)
    if amb.any():
        sel[amb] = np.argsort(scores[amb], axis=1, kind="stable")[:, :a]
    return sel


def select_beam(
    losses: np.ndarray,
    parent_codes: np.ndarray | None,
    cand_codes: np.ndarray,
    beam: int,
) -> np.ndarray:
    """Pick the best `beam` expansions per row.

    losses: (n, e) float32, one expansion per column. Expansion e of row i
    extends hypothesis e // a with candidate slot e % a, where a is the
    candidate count; callers recover those from the returned indices.
    parent_codes: (n, e, m) code prefix of each expansion (m may be 0, or
    the argument None on the first step).
    cand_codes: (n, e) code appended by each expansion.

    Rows are ranked by loss ascending. Exact float ties are broken by the
    lexicographically smallest full code tuple (prefix first, then the new
    code). Returns (n, min(beam, e)) indices into the expansion axis, best
    first.
    """
    losses = np.asarray(losses)
    n, e = losses.shape
    b = min(int(beam), e)
    order = np.argsort(losses, axis=1, kind="stable")
    # Exact ties straddling or inside the kept prefix need the full
    # lexicographic rule; the stable argsort alone would break them by
    # expansion layout, which depends on pre-selection order.
    probe = min(b + 1, e)
    sorted_losses = np.take_along_axis(losses, order[:, :probe], axis=1)
    tied = (np.diff(sorted_losses, axis=1) == 0).any(axis=1) if probe > 1 else np.zeros(n, bool)
    if tied.any():
        for i in np.flatnonzero(tied):
            keys = [cand_codes[i]]
            if parent_codes is not None and parent_codes.shape[2] > 0:
                # np.lexsort sorts by the last key first, so push prefix
                # columns after the new code, first prefix column last
                for col in range(parent_codes.shape[2] - 1, -1, -1):
                    keys.append(parent_codes[i, :, col])
            keys.append(losses[i])
            order[i] = np.lexsort(tuple(keys))
    return order[:, :b]
