"""Model initialization and training.

Training uses a two-pass scheme per batch: a plain inference encode picks
the codes, then one differentiable forward over just those codes provides
gradients. The loss sums the reconstruction error after every step, plus an
auxiliary term that pulls each scorer's top pre-selected candidate toward
the step's incoming residual (targets detached, weight 1).
"""

from __future__ import annotations

import time

import numpy as np

from .autodiff import AdamW, CosineSchedule, Tensor, add, backward, clip_grad_norm, constant
from .autodiff import gather_rows, mse_loss, zero_grads
from .baseline import ResidualQuantizer, assign_nearest
from .data import NormStats
from .errors import ConfigError, NumericalError
from .model import EncodeUsage, ModelConfig, NeuralRQ

_SQRT3 = float(np.sqrt(3.0))


def init_from_rq(
    config: ModelConfig,
    train_sample: np.ndarray,
    seed: int = 0,
    ivf_centroids: np.ndarray | None = None,
    norm_stats: NormStats | None = None,
    kmeans_iters: int = 10,
    noise: float = 0.025,
) -> NeuralRQ:
    """Initialize codebooks from a residual k-means fit plus small noise.

    Both the main and the scorer codebooks start from the same residual
    quantizer, perturbed by independent Gaussian noise with per-feature std
    `noise` times the codebook's own per-feature std. Network weights are
    Kaiming uniform; biases and block down-projections start at zero, so
    every residual block is the identity at initialization.
    """
    train_sample = np.ascontiguousarray(train_sample, dtype=np.float32)
    model = NeuralRQ.create(config, seed=seed, ivf_centroids=ivf_centroids, norm_stats=norm_stats)
    base = train_sample
    if config.ivf_enabled:
        assign = assign_nearest(train_sample, model.ivf_centroids)
        base = train_sample - model.ivf_centroids[assign]
    rq = ResidualQuantizer.train(base, config.m, config.k, iters=kmeans_iters, seed=seed + 1)
    rng = np.random.Generator(np.random.PCG64(seed + 2))
    for m, step in enumerate(model.steps):
        cb = rq.codebooks[m]
        if cb.shape[0] < config.k:
            # k-means shrank the codebook; pad by recycling rows
            reps = -(-config.k // cb.shape[0])
            cb = np.tile(cb, (reps, 1))[: config.k]
        sigma = noise * cb.std(axis=0)
        step.codebook.value[:] = cb + rng.standard_normal(cb.shape).astype(np.float32) * sigma
        step.pre_codebook.value[:] = (
            cb + rng.standard_normal(cb.shape).astype(np.float32) * sigma
        )
    return model


def _epoch_indices(n: int, spe: int, epoch: int, rng: np.random.Generator) -> np.ndarray:
    """Rotating contiguous segment of the training set, shuffled."""
    start = (epoch * spe) % n
    idx = (start + np.arange(spe, dtype=np.int64)) % n
    rng.shuffle(idx)
    return idx


def train(
    model: NeuralRQ,
    train_data: np.ndarray,
    val_data: np.ndarray | None = None,
    *,
    epochs: int = 10,
    batch_size: int = 1024,
    max_lr: float = 8e-4,
    min_lr_fraction: float = 1e-3,
    weight_decay: float = 0.1,
    clip_norm: float = 0.1,
    clip_scope: str = "global",
    warmup_steps: int = 0,
    samples_per_epoch: int | None = None,
    seed: int = 0,
    reset_dead: bool = True,
    log_fn=None,
) -> list[dict]:
    """Train in place; returns one stats dict per epoch.

    Dead codewords (never selected over an epoch, for the scorer: never
    pre-selected) are redrawn at epoch end from a uniform distribution
    matching the mean and std of that step's incoming residuals. Validation
    MSE, when a validation set is given, uses the training-time (a, b).

    clip_scope "global" bounds the joint gradient norm; "step" bounds each
    step's parameter group separately, which keeps the steps' updates
    independent of one another. With greedy assignments (b_train=1) and
    detach_steps the latter makes training exactly layer-wise: the first
    m steps of a deeper model train identically to an m-step model.
    """
    train_data = np.ascontiguousarray(train_data, dtype=np.float32)
    cfg = model.config
    n = train_data.shape[0]
    if n < 1:
        raise ConfigError("empty training set")
    spe = min(n, 10_000_000) if samples_per_epoch is None else min(int(samples_per_epoch), n)
    steps_per_epoch = max(1, -(-spe // batch_size))
    if clip_scope not in ("global", "step"):
        raise ConfigError(f"clip_scope must be 'global' or 'step', got {clip_scope!r}")
    params = model.params()
    if clip_scope == "step":
        clip_groups = []
        for step in model.steps:
            group = [step.codebook, *step.net.params(), step.pre_codebook]
            if step.pre_net is not None:
                group += step.pre_net.params()
            clip_groups.append(group)
    else:
        clip_groups = [params]
    opt = AdamW(params, weight_decay=weight_decay)
    sched = CosineSchedule(
        max_lr, epochs * steps_per_epoch, min_fraction=min_lr_fraction, warmup_steps=warmup_steps
    )
    children = np.random.SeedSequence(seed).spawn(epochs)
    stats: list[dict] = []
    global_step = 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        rng = np.random.Generator(np.random.PCG64(children[epoch]))
        idx = _epoch_indices(n, spe, epoch, rng)
        usage = EncodeUsage.create(cfg.m, cfg.k)
        code_counts = [np.zeros(cfg.k, dtype=np.int64) for _ in range(cfg.m)]
        res_count = np.zeros(cfg.m, dtype=np.int64)
        res_sum = np.zeros((cfg.m, cfg.d), dtype=np.float64)
        res_sumsq = np.zeros((cfg.m, cfg.d), dtype=np.float64)
        loss_total = 0.0
        for bstart in range(0, spe, batch_size):
            xb = train_data[idx[bstart : bstart + batch_size]]
            codes, _ = model.encode(xb, a=cfg.a_train, b=cfg.b_train, usage=usage)
            if cfg.ivf_enabled:
                x0 = model.ivf_centroids[codes[:, 0]]
                body = codes[:, 1:]
            else:
                x0 = np.zeros_like(xb)
                body = codes
            x_t = constant(xb)
            xhat_t: Tensor = constant(x0)
            loss_node: Tensor | None = None
            for m, step in enumerate(model.steps):
                sel = body[:, m]
                code_counts[m] += np.bincount(sel, minlength=cfg.k)
                r_val = xb - xhat_t.value
                res_count[m] += xb.shape[0]
                res_sum[m] += r_val.sum(axis=0, dtype=np.float64)
                res_sumsq[m] += (r_val.astype(np.float64) ** 2).sum(axis=0)

                cond = constant(xhat_t.value) if cfg.detach_steps else xhat_t
                f_t = step.net.forward_graph(gather_rows(step.codebook, sel), cond)
                xhat_t = add(cond, f_t)
                step_loss = mse_loss(xhat_t, x_t)

                # scorer loss: nudge the current top pre-selected candidate
                # toward this step's incoming residual (detached target)
                pre_cb = step.pre_codebook.value
                if step.pre_net is None:
                    d2 = (
                        np.einsum("nd,nd->n", r_val, r_val)[:, None]
                        - 2.0 * (r_val @ pre_cb.T)
                        + (pre_cb * pre_cb).sum(axis=1)
                    )
                    top1 = np.argmin(d2, axis=1)
                    aux = mse_loss(gather_rows(step.pre_codebook, top1), constant(r_val))
                else:
                    rows, k = r_val.shape[0], cfg.k
                    c_all = np.repeat(pre_cb[None, :, :], rows, axis=0).reshape(rows * k, -1)
                    g = step.pre_net.forward_np(c_all, np.repeat(xhat_t.value, k, axis=0))
                    gd = g.reshape(rows, k, -1) - r_val[:, None, :]
                    top1 = np.argmin(np.einsum("nkd,nkd->nk", gd, gd), axis=1)
                    aux = mse_loss(
                        step.pre_net.forward_graph(
                            gather_rows(step.pre_codebook, top1), constant(xhat_t.value)
                        ),
                        constant(r_val),
                    )
                for node in (step_loss, aux):
                    loss_node = node if loss_node is None else add(loss_node, node)
            if not np.isfinite(loss_node.value):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, step {global_step}; "
                    "try a lower max_lr or a tighter clip_norm"
                )
            loss_total += float(loss_node.value)
            backward(loss_node)
            for group in clip_groups:
                clip_grad_norm(group, clip_norm)
            opt.step(sched(global_step))
            zero_grads(params)
            global_step += 1

        row = {
            "epoch": epoch,
            "train_loss": loss_total / steps_per_epoch,
            "lr": sched(global_step - 1),
            "seconds": round(time.perf_counter() - t0, 3),
        }
        if val_data is not None:
            codes, _ = model.encode(val_data, a=cfg.a_train, b=cfg.b_train)
            recon = model.decode(codes)
            diff = (val_data - recon).astype(np.float64)
            row["val_mse"] = float((diff * diff).sum() / max(1, val_data.shape[0]))

        dead = dead_pre = 0
        if reset_dead:
            for m, step in enumerate(model.steps):
                cnt = max(1, int(res_count[m]))
                mu = res_sum[m] / cnt
                var = np.maximum(res_sumsq[m] / cnt - mu * mu, 0.0)
                lo = (mu - _SQRT3 * np.sqrt(var)).astype(np.float32)
                hi = (mu + _SQRT3 * np.sqrt(var)).astype(np.float32)
                for counts, param in (
                    (code_counts[m], step.codebook),
                    (usage.pre_counts[m], step.pre_codebook),
                ):
                    rows = np.flatnonzero(counts == 0)
                    if rows.size:
                        param.value[rows] = rng.uniform(
                            lo, hi, size=(rows.size, cfg.d)
                        ).astype(np.float32)
                    if param is step.codebook:
                        dead += rows.size
                    else:
                        dead_pre += rows.size
        row["dead_reset"] = dead
        row["dead_reset_pre"] = dead_pre
        stats.append(row)
        if log_fn is not None:
            log_fn(row)
    return stats
