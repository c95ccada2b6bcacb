"""IVF index and the staged search pipeline.

A query walks three stages, each narrowing the previous one:

1. probe the n_probe nearest coarse centroids (exact scan) and score every
   member of those buckets with additive-decoder lookup tables;
2. re-rank the best n_short_aq candidates with the pairwise decoder
   (explicit reconstruction, exact distance to it);
3. re-rank the best n_short_pairs candidates with the exact neural decoder
   and return the top k.

Every stage breaks exact score ties by the smaller database id, so results
are deterministic and independent of bucket layout and thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .baseline import pairwise_sq_dists
from .decoders import AdditiveDecoder, IvfCentroidCodes, PairwiseDecoder
from .errors import ConfigError
from .model import NeuralRQ


@dataclass
class SearchParams:
    n_probe: int = 8
    n_short_aq: int = 1000
    n_short_pairs: int = 100
    topk: int = 10

    def validate(self, n_buckets: int) -> None:
        if not 1 <= self.n_probe <= n_buckets:
            raise ConfigError(f"n_probe must be in [1, {n_buckets}]")
        if not (1 <= self.topk <= self.n_short_pairs <= self.n_short_aq):
            raise ConfigError(
                "shortlists must nest: topk <= n_short_pairs <= n_short_aq, all >= 1"
            )


class IvfIndex:
    """Inverted file over a trained IVF model plus its approximate decoders.

    Database entries are stored bucket-major and id-sorted inside each
    bucket. recon_norms caches ||centroid + additive reconstruction||^2 per
    entry, the constant the lookup-table distance estimate needs, so the
    additive decoder must be fitted before entries are added.
    """

    def __init__(
        self,
        model: NeuralRQ,
        aq: AdditiveDecoder,
        pairwise: PairwiseDecoder | None,
        centroid_codes: IvfCentroidCodes,
    ):
        if not model.config.ivf_enabled:
            raise ConfigError("IvfIndex needs a model trained with ivf_enabled")
        self.model = model
        self.model_hash = model.weights_hash()
        self.aq = aq
        self.pairwise = pairwise
        self.centroid_codes = centroid_codes
        self.centroids = model.ivf_centroids
        d = self.centroids.shape[1]
        self.ids = np.empty(0, dtype=np.int64)
        self.codes = np.empty((0, model.config.m), dtype=np.int32)
        self.buckets = np.empty(0, dtype=np.int32)
        self.recon_norms = np.empty(0, dtype=np.float32)
        self._offsets = np.zeros(self.centroids.shape[0] + 1, dtype=np.int64)
        self._d = d

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    def add(self, x: np.ndarray, ids: np.ndarray | None = None) -> None:
        """Encode and insert vectors (normalized space). ids default to 0..n-1
        continuing from the current size; duplicate ids are rejected."""
        x = np.ascontiguousarray(x, dtype=np.float32)
        n = x.shape[0]
        if ids is None:
            start = int(self.ids.max()) + 1 if self.size else 0
            ids = np.arange(start, start + n, dtype=np.int64)
        else:
            ids = np.asarray(ids, dtype=np.int64)
            if ids.shape != (n,):
                raise ConfigError("ids must be one per vector")
        codes, _ = self.model.encode(x)
        buckets = codes[:, 0]
        body = codes[:, 1:]
        recon = self.centroids[buckets] + self.aq.decode(body)
        norms = np.einsum("nd,nd->n", recon, recon)

        all_ids = np.concatenate([self.ids, ids])
        if np.unique(all_ids).shape[0] != all_ids.shape[0]:
            raise ConfigError("duplicate database ids")
        all_codes = np.concatenate([self.codes, body], axis=0)
        all_buckets = np.concatenate([self.buckets, buckets.astype(np.int32)])
        all_norms = np.concatenate([self.recon_norms, norms.astype(np.float32)])
        order = np.lexsort((all_ids, all_buckets))
        self.ids = all_ids[order]
        self.codes = all_codes[order]
        self.buckets = all_buckets[order]
        self.recon_norms = all_norms[order]
        counts = np.bincount(self.buckets, minlength=self.centroids.shape[0])
        self._offsets = np.zeros(self.centroids.shape[0] + 1, dtype=np.int64)
        self._offsets[1:] = np.cumsum(counts)

    def _members(self, probe: np.ndarray) -> np.ndarray:
        spans = [np.arange(self._offsets[b], self._offsets[b + 1]) for b in probe]
        return np.concatenate(spans) if spans else np.empty(0, dtype=np.int64)

    def query(
        self, q: np.ndarray, params: SearchParams, skip_pairwise: bool = False
    ) -> tuple[np.ndarray, np.ndarray]:
        """Single query; returns (ids, squared distances), best first."""
        params.validate(self.centroids.shape[0])
        if self.pairwise is None and not skip_pairwise:
            raise ConfigError("index has no pairwise decoder; use skip_pairwise=True")
        ids, dists, _ = self._query_one(np.asarray(q, dtype=np.float32), params, skip_pairwise)
        return ids, dists

    def query_batch(
        self,
        queries: np.ndarray,
        params: SearchParams,
        skip_pairwise: bool = False,
    ) -> tuple[np.ndarray, np.ndarray, dict]:
        """Run queries one by one; returns (ids, dists) stacked plus timings.

        Output arrays are (nq, topk); rows with fewer than topk reachable
        candidates are padded with id -1 and distance +inf.
        """
        queries = np.ascontiguousarray(queries, dtype=np.float32)
        params.validate(self.centroids.shape[0])
        if self.pairwise is None and not skip_pairwise:
            raise ConfigError("index has no pairwise decoder; use skip_pairwise=True")
        nq = queries.shape[0]
        out_ids = np.full((nq, params.topk), -1, dtype=np.int64)
        out_d = np.full((nq, params.topk), np.inf, dtype=np.float32)
        timing = {"stage1": 0.0, "stage2": 0.0, "stage3": 0.0}
        for qi in range(nq):
            ids, dists, spent = self._query_one(queries[qi], params, skip_pairwise)
            out_ids[qi, : ids.shape[0]] = ids
            out_d[qi, : ids.shape[0]] = dists
            for key in timing:
                timing[key] += spent[key]
        timing["total"] = sum(timing.values())
        timing["queries_per_s"] = nq / timing["total"] if timing["total"] > 0 else float("inf")
        return out_ids, out_d, timing

    def _query_one(self, q: np.ndarray, params: SearchParams, skip_pairwise: bool):
        spent = {}
        t0 = time.perf_counter()
        # stage 1: probe buckets, score members via lookup tables
        cd = pairwise_sq_dists(q[None, :], self.centroids)[0]
        probe_order = np.lexsort((np.arange(cd.shape[0]), cd))
        probe = probe_order[: params.n_probe]
        members = self._members(probe)
        cand_ids = self.ids[members]
        cand_codes = self.codes[members]
        cand_buckets = self.buckets[members]
        luts = self.aq.luts(q)
        qnorm = np.float32(q @ q)
        qcent = self.centroids[cand_buckets] @ q
        est = (
            qnorm
            - 2.0 * qcent
            - 2.0 * self.aq.lut_sums(luts, cand_codes)
            + self.recon_norms[members]
        )
        keep = np.lexsort((cand_ids, est))[: params.n_short_aq]
        members = members[keep]
        spent["stage1"] = time.perf_counter() - t0

        # stage 2: explicit pairwise reconstruction, exact distance to it
        t0 = time.perf_counter()
        if not skip_pairwise:
            ext = np.concatenate(
                [self.codes[members], self.centroid_codes.expand(self.buckets[members])],
                axis=1,
            )
            recon = self.pairwise.decode(ext) + self.centroids[self.buckets[members]]
            diff = recon - q[None, :]
            d2 = np.einsum("nd,nd->n", diff, diff)
            keep = np.lexsort((self.ids[members], d2))[: params.n_short_pairs]
            members = members[keep]
        spent["stage2"] = time.perf_counter() - t0

        # stage 3: exact neural decode of the survivors, id-sorted for
        # deterministic arithmetic regardless of shortlist order
        t0 = time.perf_counter()
        members = members[np.argsort(self.ids[members], kind="stable")]
        final_ids = self.ids[members]
        codes_full = np.concatenate(
            [self.buckets[members, None].astype(np.int32), self.codes[members]], axis=1
        )
        recon = self.model.decode(codes_full)
        diff = recon - q[None, :]
        d2 = np.einsum("nd,nd->n", diff, diff)
        order = np.lexsort((final_ids, d2))[: params.topk]
        spent["stage3"] = time.perf_counter() - t0
        return final_ids[order], d2[order], spent


def compute_groundtruth(db: np.ndarray, queries: np.ndarray, topk: int = 100) -> np.ndarray:
    """Exact nearest neighbors by full scan; ties go to the smaller index."""
    db64 = np.asarray(db, dtype=np.float64)
    q64 = np.asarray(queries, dtype=np.float64)
    dbn = (db64 * db64).sum(axis=1)
    out = np.empty((q64.shape[0], min(topk, db64.shape[0])), dtype=np.int64)
    chunk = max(1, (1 << 22) // max(1, db64.shape[0]))
    for s in range(0, q64.shape[0], chunk):
        qc = q64[s : s + chunk]
        d2 = dbn[None, :] - 2.0 * (qc @ db64.T)
        order = np.argsort(d2, axis=1, kind="stable")
        out[s : s + chunk] = order[:, : out.shape[1]]
    return out


def eval_recall(
    result_ids: np.ndarray, groundtruth: np.ndarray, ranks: tuple[int, ...] = (1, 10, 100)
) -> dict[int, float]:
    """R@r: fraction of queries whose true nearest neighbor is in the top r."""
    result_ids = np.asarray(result_ids)
    gt_first = np.asarray(groundtruth)
    if gt_first.ndim == 2:
        gt_first = gt_first[:, 0]
    out = {}
    for r in ranks:
        r_eff = min(r, result_ids.shape[1])
        hits = (result_ids[:, :r_eff] == gt_first[:, None]).any(axis=1)
        out[int(r)] = float(hits.mean())
    return out


def eval_mse(model, x: np.ndarray, **encode_kw) -> float:
    """Mean squared reconstruction error, accumulated in float64.

    Works for any codec exposing encode/decode; model encode returning
    (codes, losses) tuples is unwrapped.
    """
    x = np.asarray(x, dtype=np.float32)
    enc = model.encode(x, **encode_kw)
    codes = enc[0] if isinstance(enc, tuple) else enc
    recon = model.decode(codes)
    diff = (x - recon).astype(np.float64)
    return float((diff * diff).sum() / max(1, x.shape[0]))
