"""Residual quantizer whose codebooks are adjusted by per-step networks.

Decoding follows the recurrence

    xhat_0 = 0 (or the assigned coarse centroid when IVF is enabled)
    xhat_m = xhat_{m-1} + f_m(C_m[i_m] | xhat_{m-1})

where each f_m is a small residual MLP conditioned on the reconstruction so
far. Encoding runs beam search over the steps; to avoid evaluating f_m on
all K codewords, a cheap scorer with its own codebook pre-selects `a`
candidates per hypothesis and only those go through the network.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import parallel
from .autodiff import Parameter, Tensor, add, concat, gather_rows, linear, relu
from .baseline import assign_nearest
from .data import NormStats
from .errors import ConfigError
from .ranking import greedy_pick, select_beam, sq_norms, top_a_stable

_PRESETS = {"S": (2, 128, 256), "M": (4, 384, 384), "L": (16, 384, 384)}


@dataclass
class ModelConfig:
    m: int
    k: int
    d: int
    d_e: int = 128
    d_h: int = 256
    depth: int = 2
    preselect_depth: int = 0
    preselect_hidden: int = 128
    a_train: int = 16
    b_train: int = 32
    a_eval: int = 32
    b_eval: int = 64
    ivf_enabled: bool = False
    detach_steps: bool = False

    @classmethod
    def preset(cls, name: str, *, m: int, k: int, d: int, **overrides) -> "ModelConfig":
        """Size presets: S=(depth 2, d_e 128, d_h 256), M=(4, 384, 384), L=(16, 384, 384)."""
        if name not in _PRESETS:
            raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(_PRESETS)}")
        depth, d_e, d_h = _PRESETS[name]
        cfg = cls(m=m, k=k, d=d, d_e=d_e, d_h=d_h, depth=depth, **overrides)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("m", "k", "d", "d_e", "d_h"):
            if getattr(self, name) < 1:
                raise ConfigError(f"config field {name} must be >= 1")
        if self.depth < 0 or self.preselect_depth < 0:
            raise ConfigError("network depths must be >= 0")
        for name in ("a_train", "b_train", "a_eval", "b_eval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"config field {name} must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


_GEMM_TILE = 16384  # rows per block-matmul tile; fixed so results never depend on load


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class StepNet:
    """One step's codeword adjustment network.

    Layout: optional input projection d -> d_e, a biased conditioning layer
    (d_e + d) -> d_e applied to concat([codeword_emb, xhat]), `depth`
    two-layer residual blocks d_e -> d_h -> d_e, optional output projection
    d_e -> d, and a skip connection adding the raw codeword to the output.
    The conditioning layer carries the only bias. Projections are omitted
    (identity) when d == d_e.
    """

    def __init__(self, d: int, d_e: int, d_h: int, depth: int, rng: np.random.Generator, tag: str):
        self.d, self.d_e, self.d_h, self.depth = d, d_e, d_h, depth
        self.in_proj = (
            Parameter(_kaiming_uniform(rng, d, (d, d_e)), f"{tag}.in_proj") if d != d_e else None
        )
        self.cond_w = Parameter(_kaiming_uniform(rng, d_e + d, (d_e + d, d_e)), f"{tag}.cond_w")
        self.cond_b = Parameter(np.zeros(d_e, dtype=np.float32), f"{tag}.cond_b")
        self.blocks = []
        for i in range(depth):
            up = Parameter(_kaiming_uniform(rng, d_e, (d_e, d_h)), f"{tag}.block{i}.up")
            down = Parameter(np.zeros((d_h, d_e), dtype=np.float32), f"{tag}.block{i}.down")
            self.blocks.append((up, down))
        self.out_proj = (
            Parameter(_kaiming_uniform(rng, d_e, (d_e, d)), f"{tag}.out_proj")
            if d != d_e
            else None
        )

    def params(self) -> list[Parameter]:
        out = []
        if self.in_proj is not None:
            out.append(self.in_proj)
        out += [self.cond_w, self.cond_b]
        for up, down in self.blocks:
            out += [up, down]
        if self.out_proj is not None:
            out.append(self.out_proj)
        return out

    def forward_np(self, c: np.ndarray, xhat: np.ndarray) -> np.ndarray:
        """Adjusted codewords for (rows, d) codewords and reconstructions."""
        e = c @ self.in_proj.value if self.in_proj is not None else c
        h = e + (np.concatenate([e, xhat], axis=1) @ self.cond_w.value + self.cond_b.value)
        for up, down in self.blocks:
            h = h + np.maximum(h @ up.value, 0.0) @ down.value
        out = h @ self.out_proj.value if self.out_proj is not None else h
        return c + out

    def make_cache(self, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-codeword tables reused across an encode/decode call.

        The embedding, its skip connection, and the codeword half of the
        conditioning layer depend only on the codebook, so they collapse into
        one precomputed table; candidates then cost a gather instead of
        projections.
        """
        e = codebook @ self.in_proj.value if self.in_proj is not None else codebook
        w = self.cond_w.value
        hp = e + (e @ w[: self.d_e] + self.cond_b.value)
        return hp, w[self.d_e :]

    def forward_all(
        self,
        cache: tuple[np.ndarray, np.ndarray],
        codebook: np.ndarray,
        cand: np.ndarray,
        xhat: np.ndarray,
    ) -> np.ndarray:
        """Adjusted codewords for every candidate: (rows, a) indices -> (rows, a, d).

        Same function as forward_np up to float reassociation (the
        conditioning layer is evaluated as two partial products). Rows are
        processed in fixed-size tiles through preallocated scratch so the
        block matmuls stay in cache; tiling is per row and does not affect
        values.
        """
        hp_tab, w_bot = cache
        rows, a = cand.shape
        d = codebook.shape[1]
        h = hp_tab[cand]
        h += (xhat @ w_bot)[:, None, :]
        flat = rows * a
        h = h.reshape(flat, self.d_e)
        out = codebook[cand].reshape(flat, d)
        tile = min(_GEMM_TILE, flat)
        r = np.empty((tile, self.d_h), dtype=np.float32)
        t = np.empty((tile, self.d_e), dtype=np.float32)
        o = np.empty((tile, d), dtype=np.float32) if self.out_proj is not None else None
        for s in range(0, flat, tile):
            hv = h[s : s + tile]
            m_rows = hv.shape[0]
            rv, tv = r[:m_rows], t[:m_rows]
            for up, down in self.blocks:
                np.matmul(hv, up.value, out=rv)
                np.maximum(rv, 0.0, out=rv)
                np.matmul(rv, down.value, out=tv)
                hv += tv
            if self.out_proj is not None:
                ov = o[:m_rows]
                np.matmul(hv, self.out_proj.value, out=ov)
                out[s : s + tile] += ov
            else:
                out[s : s + tile] += hv
        return out.reshape(rows, a, d)

    def forward_graph(self, c: Tensor, xhat: Tensor) -> Tensor:
        e = linear(c, self.in_proj) if self.in_proj is not None else c
        h = add(e, linear(concat(e, xhat), self.cond_w, self.cond_b))
        for up, down in self.blocks:
            h = add(h, linear(relu(linear(h, up)), down))
        out = linear(h, self.out_proj) if self.out_proj is not None else h
        return add(c, out)

    def zero_output_projection(self) -> None:
        """Force f(c | xhat) = c exactly; used by reduction identity tests."""
        if self.out_proj is None:
            self.out_proj = Parameter(
                np.zeros((self.d_e, self.d), dtype=np.float32), "zeroed.out_proj"
            )
        else:
            self.out_proj.value[:] = 0.0


@dataclass
class _Step:
    codebook: Parameter  # (k, d)
    net: StepNet
    pre_codebook: Parameter  # (k, d), codebook of the candidate scorer
    pre_net: StepNet | None  # None when preselect_depth == 0


@dataclass
class EncodeUsage:
    """Per-step histograms of pre-selected candidate indices."""

    pre_counts: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, m: int, k: int) -> "EncodeUsage":
        return cls([np.zeros(k, dtype=np.int64) for _ in range(m)])


class NeuralRQ:
    """Beam-search encoder / recurrent decoder around per-step StepNets."""

    def __init__(
        self,
        config: ModelConfig,
        steps: list[_Step],
        ivf_centroids: np.ndarray | None = None,
        norm_stats: NormStats | None = None,
    ):
        config.validate()
        if config.ivf_enabled and ivf_centroids is None:
            raise ConfigError("ivf_enabled model needs ivf_centroids")
        self.config = config
        self.steps = steps
        self.ivf_centroids = (
            np.ascontiguousarray(ivf_centroids, dtype=np.float32)
            if ivf_centroids is not None
            else None
        )
        self.norm_stats = norm_stats

    # -- construction ------------------------------------------------------

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        seed: int = 0,
        ivf_centroids: np.ndarray | None = None,
        norm_stats: NormStats | None = None,
    ) -> "NeuralRQ":
        """Random initialization; codebooks standard normal scaled by 1/sqrt(d)."""
        rng = np.random.Generator(np.random.PCG64(seed))
        steps = []
        for m in range(config.m):
            cb = (rng.standard_normal((config.k, config.d)) / np.sqrt(config.d)).astype(
                np.float32
            )
            pre = (rng.standard_normal((config.k, config.d)) / np.sqrt(config.d)).astype(
                np.float32
            )
            net = StepNet(config.d, config.d_e, config.d_h, config.depth, rng, f"step{m}")
            pre_net = (
                StepNet(
                    config.d,
                    config.preselect_hidden,
                    config.preselect_hidden,
                    config.preselect_depth,
                    rng,
                    f"step{m}.pre",
                )
                if config.preselect_depth > 0
                else None
            )
            steps.append(
                _Step(
                    Parameter(cb, f"step{m}.codebook"),
                    net,
                    Parameter(pre, f"step{m}.pre_codebook"),
                    pre_net,
                )
            )
        return cls(config, steps, ivf_centroids, norm_stats)

    def params(self) -> list[Parameter]:
        out: list[Parameter] = []
        for step in self.steps:
            out.append(step.codebook)
            out += step.net.params()
            out.append(step.pre_codebook)
            if step.pre_net is not None:
                out += step.pre_net.params()
        return out

    # -- inference ---------------------------------------------------------

    def _pre_cache(self, step_idx: int):
        step = self.steps[step_idx]
        cb = step.pre_codebook.value
        if step.pre_net is None:
            return ((cb * cb).sum(axis=1),)
        return (step.pre_net.make_cache(cb),)

    def preselect(
        self, step_idx: int, residual: np.ndarray, xhat: np.ndarray, a: int, _cache=None
    ) -> np.ndarray:
        """Top-a candidate codes per row, scored by the cheap scorer.

        With preselect_depth == 0 the score is the plain squared distance to
        the scorer codebook, computed via ||r||^2 - 2<r, c> + ||c||^2 with
        precomputed codeword norms. Ties go to the smaller index.
        """
        step = self.steps[step_idx]
        cb = step.pre_codebook.value
        a = min(int(a), cb.shape[0])
        cache = self._pre_cache(step_idx) if _cache is None else _cache
        if step.pre_net is None:
            rn = np.einsum("rd,rd->r", residual, residual)
            scores = rn[:, None] - 2.0 * (residual @ cb.T) + cache[0]
        else:
            rows, k = residual.shape[0], cb.shape[0]
            cand = np.broadcast_to(np.arange(k), (rows, k))
            g = step.pre_net.forward_all(cache[0], cb, cand, xhat)
            diff = residual[:, None, :] - g
            scores = sq_norms(diff)
        return top_a_stable(scores, a).astype(np.int32)

    def _encode_rows(
        self,
        x: np.ndarray,
        a: int,
        b: int,
        use_m: int,
        usage: EncodeUsage | None,
        caches,
        pre_caches,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        n, d = x.shape
        if self.config.ivf_enabled:
            bucket = assign_nearest(x, self.ivf_centroids).astype(np.int32)
            x0 = self.ivf_centroids[bucket]
        else:
            bucket = None
            x0 = np.zeros_like(x)
        resid = (x - x0)[:, None, :]  # (n, hyp, d)
        xhat = x0[:, None, :].copy()
        codes = np.zeros((n, 1, 0), dtype=np.int32)
        rows_idx = np.arange(n)[:, None]
        losses = None
        for m in range(use_m):
            step = self.steps[m]
            hyp = resid.shape[1]
            flat = n * hyp
            r_flat = resid.reshape(flat, d)
            xh_flat = xhat.reshape(flat, d)
            cand = self.preselect(m, r_flat, xh_flat, a, _cache=pre_caches[m])
            a_eff = cand.shape[1]
            if usage is not None:
                usage.pre_counts[m] += np.bincount(cand.ravel(), minlength=self.config.k)
            f = step.net.forward_all(caches[m], step.codebook.value, cand, xh_flat)
            diff = r_flat[:, None, :] - f
            step_losses = sq_norms(diff)  # (flat, a_eff)

            e = hyp * a_eff
            sel = select_beam(
                step_losses.reshape(n, e),
                np.repeat(codes, a_eff, axis=1),
                cand.reshape(n, e),
                b,
            )
            parent = sel // a_eff
            slot = sel % a_eff
            resid = diff.reshape(n, hyp, a_eff, d)[rows_idx, parent, slot]
            xhat = xhat[rows_idx, parent] + f.reshape(n, hyp, a_eff, d)[rows_idx, parent, slot]
            codes = np.concatenate(
                [
                    codes[rows_idx, parent],
                    cand.reshape(n, e)[rows_idx, sel][:, :, None],
                ],
                axis=2,
            )
            losses = step_losses.reshape(n, e)[rows_idx, sel]
        final_codes = codes[:, 0, :]
        final_losses = losses[:, 0] if losses is not None else np.zeros(n, dtype=np.float32)
        return final_codes, final_losses, bucket

    def encode(
        self,
        x: np.ndarray,
        a: int | None = None,
        b: int | None = None,
        steps: int | None = None,
        usage: EncodeUsage | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Beam-search encode.

        Returns (codes, losses): codes is (n, m) int32, with a leading
        coarse-centroid column when IVF is enabled (so (n, m + 1)); losses
        is the final squared reconstruction error tracked by the beam,
        one entry per vector.
        """
        x = np.ascontiguousarray(x, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.config.d:
            raise ConfigError(f"encode expects (n, {self.config.d}) input, got {x.shape}")
        cfg = self.config
        a = cfg.a_eval if a is None else int(a)
        b = cfg.b_eval if b is None else int(b)
        if a < 1 or b < 1:
            raise ConfigError("a and b must be >= 1")
        use_m = cfg.m if steps is None else int(steps)
        if not 1 <= use_m <= cfg.m:
            raise ConfigError(f"step override must be in [1, {cfg.m}]")
        n = x.shape[0]
        width = use_m + (1 if cfg.ivf_enabled else 0)
        codes = np.empty((n, width), dtype=np.int32)
        losses = np.empty(n, dtype=np.float32)
        # per-row footprint is (hypotheses x candidates x d) floats; the cap
        # keeps per-step intermediates cache-sized. Depends only on the
        # arguments, never on threads or load.
        a_eff = min(a, cfg.k)
        per_row = max(1, min(b, 1024) * a_eff * cfg.d)
        chunk = max(32, min(8192, (1 << 20) // per_row))
        caches = [s.net.make_cache(s.codebook.value) for s in self.steps[:use_m]]
        pre_caches = [self._pre_cache(m) for m in range(use_m)]

        def work(start: int, stop: int) -> None:
            c, l, bucket = self._encode_rows(
                x[start:stop], a, b, use_m, usage, caches, pre_caches
            )
            if cfg.ivf_enabled:
                codes[start:stop, 0] = bucket
                codes[start:stop, 1:] = c
            else:
                codes[start:stop] = c
            losses[start:stop] = l

        if usage is not None:
            # usage histograms are accumulated in place; keep it single-threaded
            for s in range(0, n, chunk):
                work(s, min(s + chunk, n))
        else:
            parallel.run_chunked(work, n, chunk)
        return codes, losses

    def encode_greedy(
        self, x: np.ndarray, a: int | None = None, steps: int | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Single-hypothesis encoder: keep the best candidate at every step."""
        x = np.ascontiguousarray(x, dtype=np.float32)
        cfg = self.config
        a = cfg.a_eval if a is None else int(a)
        use_m = cfg.m if steps is None else int(steps)
        n, d = x.shape
        if cfg.ivf_enabled:
            bucket = assign_nearest(x, self.ivf_centroids).astype(np.int32)
            x0 = self.ivf_centroids[bucket]
        else:
            bucket = None
            x0 = np.zeros_like(x)
        resid = x - x0
        xhat = x0.copy()
        cols = []
        losses = np.zeros(n, dtype=np.float32)
        for m in range(use_m):
            step = self.steps[m]
            cand = self.preselect(m, resid, xhat, a)
            f = step.net.forward_all(
                step.net.make_cache(step.codebook.value), step.codebook.value, cand, xhat
            )
            diff = resid[:, None, :] - f
            step_losses = sq_norms(diff)
            slot = greedy_pick(step_losses, cand.astype(np.int64))
            # greedy_pick returns the winning code value; map back to its slot
            slot_idx = np.argmax(cand == slot[:, None].astype(np.int32), axis=1)
            rows = np.arange(n)
            cols.append(cand[rows, slot_idx].astype(np.int32))
            resid = diff[rows, slot_idx]
            xhat = xhat + f[rows, slot_idx]
            losses = step_losses[rows, slot_idx]
        codes = np.stack(cols, axis=1)
        if cfg.ivf_enabled:
            codes = np.concatenate([bucket[:, None], codes], axis=1)
        return codes, losses

    def decode(self, codes: np.ndarray, steps: int | None = None) -> np.ndarray:
        """Replay the reconstruction recurrence for (n, m) codes.

        With IVF enabled the first column is the coarse centroid id. A steps
        override (or narrower code array) truncates decoding to a prefix.
        """
        codes = np.asarray(codes)
        cfg = self.config
        if cfg.ivf_enabled:
            x0 = self.ivf_centroids[codes[:, 0]]
            body = codes[:, 1:]
        else:
            x0 = np.zeros((codes.shape[0], cfg.d), dtype=np.float32)
            body = codes
        use_m = body.shape[1] if steps is None else int(steps)
        if not 0 <= use_m <= min(cfg.m, body.shape[1]):
            raise ConfigError(f"cannot decode {use_m} steps from {body.shape[1]} code columns")
        out = np.empty((codes.shape[0], cfg.d), dtype=np.float32)
        chunk = max(64, (1 << 22) // max(1, cfg.d))
        caches = [s.net.make_cache(s.codebook.value) for s in self.steps[:use_m]]

        def work(start: int, stop: int) -> None:
            xhat = x0[start:stop].copy()
            for m in range(use_m):
                step = self.steps[m]
                f = step.net.forward_all(
                    caches[m], step.codebook.value, body[start:stop, m, None], xhat
                )
                xhat = xhat + f[:, 0]
            out[start:stop] = xhat

        parallel.run_chunked(work, codes.shape[0], chunk)
        return out

    # -- bookkeeping ---------------------------------------------------------

    def weights_hash(self) -> str:
        """Stable digest of the config and every parameter, for artifact pairing."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for p in self.params():
            h.update(p.value.tobytes())
        if self.ivf_centroids is not None:
            h.update(self.ivf_centroids.tobytes())
        if self.norm_stats is not None:
            h.update(json.dumps(self.norm_stats.as_dict()).encode())
        return h.hexdigest()
