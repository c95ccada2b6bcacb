"""Command-line interface.

Subcommands: synth, train, encode, decode, eval, build-index, search,
sweep-report. A config file of `key = value` lines can preload any
subcommand's options (explicit flags win); unknown keys are rejected.

Exit codes: 0 success, 2 configuration/usage error, 3 data format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import __version__, parallel
from .baseline import kmeans
from .data import apply_norm, fit_norm, read_vecs, split, synth_gmm, write_vecs
from .decoders import (
    fit_additive_lstsq,
    fit_additive_sequential,
    quantize_ivf_centroids,
    select_pairs_greedy,
)
from .errors import ConfigError, DataFormatError, NeuralVqError, NumericalError
from .model import ModelConfig
from .search import IvfIndex, SearchParams, compute_groundtruth, eval_recall
from .serialize import (
    load_index,
    load_model,
    read_codes,
    save_index,
    save_model,
    write_codes,
)
from .training import init_from_rq, train

logger = logging.getLogger("neuralvq")


def _read_config_file(path: str) -> dict:
    out = {}
    try:
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected 'key = value'")
                key, value = (part.strip() for part in line.split("=", 1))
                out[key.replace("-", "_")] = value
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return out


def _coerce(parser_action, raw: str):
    if parser_action.type is not None:
        return parser_action.type(raw)
    if isinstance(parser_action.const, bool) or isinstance(parser_action.default, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {parser_action.dest}: boolean expected, got {raw!r}")
    return raw


def _apply_config(sub: argparse.ArgumentParser, cfg: dict) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help",)}
    overrides = {}
    for key, raw in cfg.items():
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r} for this command")
        overrides[key] = _coerce(actions[key], raw)
    sub.set_defaults(**overrides)


def _load_normalized(model, path: str) -> np.ndarray:
    x = read_vecs(path)
    if model.norm_stats is not None:
        x = apply_norm(x, model.norm_stats, "forward")
    return x


def _jsonl_write(path: str | None, rows: list[dict]) -> None:
    if path is None:
        return
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# -- subcommand bodies -----------------------------------------------------------


def cmd_synth(args) -> int:
    total = args.n + args.db_n + args.queries_n
    x = synth_gmm(args.seed, total, args.d, args.components, args.spread)
    parts = split(x, [args.n, args.db_n, args.queries_n], seed=args.seed + 1)
    write_vecs(args.out, parts[0])
    logger.info("wrote %d train vectors to %s", args.n, args.out)
    if args.db_n:
        if not args.db_out:
            raise ConfigError("--db-n needs --db-out")
        write_vecs(args.db_out, parts[1])
    if args.queries_n:
        if not args.queries_out:
            raise ConfigError("--queries-n needs --queries-out")
        write_vecs(args.queries_out, parts[2])
    return 0


def cmd_train(args) -> int:
    train_x = read_vecs(args.train)
    val_x = read_vecs(args.val) if args.val else None
    stats = None
    if not args.no_normalize:
        stats = fit_norm(train_x)
        train_x = apply_norm(train_x, stats, "forward")
        if val_x is not None:
            val_x = apply_norm(val_x, stats, "forward")
    d = train_x.shape[1]
    a_train = args.a_train if args.a_train is not None else (32 if args.b_train == 1 else 16)
    common = dict(
        m=args.m,
        k=args.k,
        d=d,
        preselect_depth=args.preselect_depth,
        preselect_hidden=args.preselect_hidden,
        a_train=a_train,
        b_train=args.b_train,
        a_eval=args.a_eval,
        b_eval=args.b_eval,
        ivf_enabled=args.k_ivf > 0,
        detach_steps=args.detach_steps,
    )
    if args.preset:
        config = ModelConfig.preset(args.preset, **common)
    else:
        config = ModelConfig(d_e=args.d_e, d_h=args.d_h, depth=args.depth, **common)
        config.validate()
    centroids = None
    if args.k_ivf > 0:
        centroids = kmeans(train_x, args.k_ivf, iters=args.ivf_iters, seed=args.seed)
    sample = train_x
    if args.init_sample and args.init_sample < train_x.shape[0]:
        idx = np.random.Generator(np.random.PCG64(args.seed)).choice(
            train_x.shape[0], args.init_sample, replace=False
        )
        sample = train_x[idx]
    model = init_from_rq(
        config,
        sample,
        seed=args.seed,
        ivf_centroids=centroids,
        norm_stats=stats,
        kmeans_iters=args.kmeans_iters,
    )
    rows = train(
        model,
        train_x,
        val_x,
        epochs=args.epochs,
        batch_size=args.batch_size,
        max_lr=args.lr,
        weight_decay=args.weight_decay,
        clip_norm=args.clip_norm,
        clip_scope=args.clip_scope,
        warmup_steps=args.warmup_steps,
        samples_per_epoch=args.samples_per_epoch,
        seed=args.seed,
        log_fn=lambda row: logger.info("epoch %s", json.dumps(row, sort_keys=True)),
    )
    save_model(args.out, model)
    for row in rows:
        row["config"] = config.to_dict()
        row["model_hash"] = model.weights_hash()
        row["version"] = __version__
    _jsonl_write(args.metrics, rows)
    logger.info("saved model to %s (hash %s)", args.out, model.weights_hash()[:12])
    return 0


def cmd_encode(args) -> int:
    model = load_model(args.model)
    x = _load_normalized(model, args.input)
    codes, losses = model.encode(x, a=args.a, b=args.b, steps=args.steps)
    k_ivf = model.ivf_centroids.shape[0] if model.ivf_centroids is not None else 0
    write_codes(args.out, codes, max(model.config.k, k_ivf), model.weights_hash())
    logger.info(
        "encoded %d vectors -> %s (mean loss %.6g)", x.shape[0], args.out, float(losses.mean())
    )
    return 0


def cmd_decode(args) -> int:
    model = load_model(args.model)
    codes, _, stored_hash = read_codes(args.codes)
    if stored_hash and stored_hash != model.weights_hash():
        raise ConfigError(
            f"{args.codes} was produced by a different model (hash mismatch)"
        )
    recon = model.decode(codes, steps=args.steps)
    if model.norm_stats is not None and not args.normalized:
        recon = apply_norm(recon, model.norm_stats, "inverse")
    write_vecs(args.out, recon)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    db = _load_normalized(model, args.db)
    codes, losses = model.encode(db, a=args.a, b=args.b, steps=args.steps)
    recon = model.decode(codes, steps=args.steps)
    diff = (db - recon).astype(np.float64)
    mse = float((diff * diff).sum() / max(1, db.shape[0]))
    report = {
        "n": int(db.shape[0]),
        "mse": mse,
        "mse_x1e4": mse * 1e4,
        "mean_encode_loss": float(losses.mean()) if losses.size else 0.0,
        "model_hash": model.weights_hash(),
        "version": __version__,
    }
    if model.norm_stats is not None and args.raw_space:
        scale = float(model.norm_stats.scale)
        report["mse_raw"] = mse * scale * scale
    if args.queries:
        queries = _load_normalized(model, args.queries)
        if args.gt:
            gt = read_vecs(args.gt, fmt="ivecs")
        else:
            gt = compute_groundtruth(db, queries, topk=1)
        dists = (
            (recon * recon).sum(axis=1)[None, :] - 2.0 * (queries @ recon.T)
        )
        order = np.argsort(dists, axis=1, kind="stable")[:, :100]
        report["recall"] = {str(r): v for r, v in eval_recall(order, gt).items()}
    out = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out + "\n")
    print(out)
    return 0


def cmd_build_index(args) -> int:
    model = load_model(args.model)
    if not model.config.ivf_enabled:
        raise ConfigError("build-index needs a model trained with --k-ivf > 0")
    db = _load_normalized(model, args.db)
    codes, _ = model.encode(db)
    buckets = codes[:, 0]
    body = codes[:, 1:]
    resid = db - model.ivf_centroids[buckets]
    if args.aq_mode == "ls":
        aq = fit_additive_lstsq(body, resid, model.config.k, ridge=args.ridge)
    else:
        aq = fit_additive_sequential(body, resid, model.config.k)
    cc = quantize_ivf_centroids(
        model.ivf_centroids, args.cc_k, target_rel_mse=args.cc_target, seed=args.seed
    )
    ext = np.concatenate([body, cc.expand(buckets)], axis=1)
    kk = max(model.config.k, args.cc_k)
    pairwise = select_pairs_greedy(ext, resid, args.pairs, kk) if args.pairs > 0 else None
    index = IvfIndex(model, aq, pairwise, cc)
    index.add(db)
    save_index(args.out, index)
    logger.info(
        "indexed %d vectors in %d buckets (centroid codes: %d steps, rel mse %.2e)",
        db.shape[0],
        model.ivf_centroids.shape[0],
        cc.m_tilde,
        cc.rel_mse,
    )
    return 0


def _parse_sweep(raw: str) -> list[tuple[int, int, int, int]]:
    settings = []
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        nums = [int(v) for v in part.split(",")]
        if len(nums) != 4:
            raise ConfigError(
                f"sweep setting {part!r} must be n_probe,n_short_aq,n_short_pairs,topk"
            )
        settings.append(tuple(nums))
    if not settings:
        raise ConfigError("empty sweep")
    return settings


def cmd_search(args) -> int:
    model = load_model(args.model)
    index = load_index(args.index, model)
    queries = _load_normalized(model, args.queries)
    if args.gt:
        gt = read_vecs(args.gt, fmt="ivecs")
    elif args.db:
        db = _load_normalized(model, args.db)
        gt = compute_groundtruth(db, queries, topk=1)
    else:
        raise ConfigError("search needs --gt or --db to evaluate recall")
    if args.sweep:
        settings = _parse_sweep(args.sweep)
    else:
        settings = [(args.n_probe, args.short_aq, args.short_pairs, args.topk)]
    rows = []
    for n_probe, s_aq, s_pairs, topk in settings:
        params = SearchParams(n_probe, s_aq, s_pairs, topk)
        ids, _, timing = index.query_batch(queries, params, skip_pairwise=args.skip_pairwise)
        recalls = eval_recall(ids, gt, ranks=(1, 10, 100))
        row = {
            "n_probe": n_probe,
            "n_short_aq": s_aq,
            "n_short_pairs": s_pairs,
            "topk": topk,
            "skip_pairwise": bool(args.skip_pairwise),
            "recall": {str(r): v for r, v in recalls.items()},
            "timing": {k: round(v, 6) for k, v in timing.items()},
            "model_hash": index.model_hash,
            "version": __version__,
        }
        rows.append(row)
        logger.info(
            "probe=%d shortlists=(%d,%d) topk=%d R@1=%.4f R@10=%.4f qps=%.1f",
            n_probe, s_aq, s_pairs, topk,
            recalls.get(1, 0.0), recalls.get(10, 0.0), timing["queries_per_s"],
        )
    _jsonl_write(args.out, rows)
    if not args.out:
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    return 0


def cmd_sweep_report(args) -> int:
    rows = []
    for path in args.inputs:
        try:
            with open(path) as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rows.append(json.loads(line))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"cannot read sweep rows from {path}: {exc}") from exc
    if not rows:
        raise ConfigError("no sweep rows found")

    def metric(row: dict, name: str) -> float:
        if name == "qps":
            return float(row["timing"]["queries_per_s"])
        if name.startswith("r@"):
            return float(row["recall"][name[2:]])
        raise ConfigError(f"unknown metric {name!r} (use qps or r@1, r@10, r@100)")

    xs = [metric(r, args.x) for r in rows]
    ys = [metric(r, args.y) for r in rows]
    pareto = []
    for i in range(len(rows)):
        dominated = any(
            (xs[j] >= xs[i] and ys[j] >= ys[i] and (xs[j] > xs[i] or ys[j] > ys[i]))
            for j in range(len(rows))
        )
        pareto.append(not dominated)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_probe", "n_short_aq", "n_short_pairs", "topk", args.x, args.y, "pareto"])
        for row, x, y, front in zip(rows, xs, ys, pareto):
            writer.writerow(
                [row.get("n_probe"), row.get("n_short_aq"), row.get("n_short_pairs"),
                 row.get("topk"), x, y, int(front)]
            )
    logger.info("wrote %d rows (%d on the frontier) to %s", len(rows), sum(pareto), args.out)
    return 0


# -- parser ----------------------------------------------------------------------


def _build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="neuralvq", description=__doc__)
    parser.add_argument("--threads", type=int, default=1, help="worker threads for encode/decode")
    parser.add_argument("--config", default=None, help="key = value file preloading options")
    parser.add_argument("--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)
    table = {}

    p = subs.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=100000)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--components", type=int, default=256)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--db-n", type=int, default=0)
    p.add_argument("--db-out", default=None)
    p.add_argument("--queries-n", type=int, default=0)
    p.add_argument("--queries-out", default=None)
    p.set_defaults(fn=cmd_synth)
    table["synth"] = p

    p = subs.add_parser("train", help="train a model")
    p.add_argument("--train", required=True, help="training vectors (fvecs)")
    p.add_argument("--val", default=None)
    p.add_argument("--out", required=True, help="model output path")
    p.add_argument("--metrics", default=None, help="jsonl of per-epoch stats")
    p.add_argument("--preset", choices=["S", "M", "L"], default=None)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--d-e", type=int, default=128)
    p.add_argument("--d-h", type=int, default=256)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--preselect-depth", type=int, default=0)
    p.add_argument("--preselect-hidden", type=int, default=128)
    p.add_argument("--a-train", type=int, default=None)
    p.add_argument("--b-train", type=int, default=32)
    p.add_argument("--a-eval", type=int, default=32)
    p.add_argument("--b-eval", type=int, default=64)
    p.add_argument("--detach-steps", action="store_true")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--lr", type=float, default=8e-4)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--clip-norm", type=float, default=0.1)
    p.add_argument("--clip-scope", choices=["global", "step"], default="global")
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--samples-per-epoch", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kmeans-iters", type=int, default=10)
    p.add_argument("--init-sample", type=int, default=200000)
    p.add_argument("--k-ivf", type=int, default=0)
    p.add_argument("--ivf-iters", type=int, default=25)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(fn=cmd_train)
    table["train"] = p

    p = subs.add_parser("encode", help="encode vectors to a packed code file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--a", type=int, default=None)
    p.add_argument("--b", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_encode)
    table["encode"] = p

    p = subs.add_parser("decode", help="reconstruct vectors from codes")
    p.add_argument("--model", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--normalized", action="store_true", help="skip inverse normalization")
    p.set_defaults(fn=cmd_decode)
    table["decode"] = p

    p = subs.add_parser("eval", help="MSE / recall report for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--queries", default=None)
    p.add_argument("--gt", default=None, help="ivecs groundtruth (else computed)")
    p.add_argument("--a", type=int, default=None)
    p.add_argument("--b", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--raw-space", action="store_true", help="also report raw-space MSE")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)
    table["eval"] = p

    p = subs.add_parser("build-index", help="build an IVF index over a database")
    p.add_argument("--model", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=8, help="pairwise tables to fit (0 disables)")
    p.add_argument("--aq-mode", choices=["ls", "sequential"], default="ls")
    p.add_argument("--ridge", type=float, default=None)
    p.add_argument("--cc-k", type=int, default=256, help="codebook size for centroid codes")
    p.add_argument("--cc-target", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_build_index)
    table["build-index"] = p

    p = subs.add_parser("search", help="query an IVF index")
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", default=None)
    p.add_argument("--db", default=None, help="database vectors, to compute groundtruth")
    p.add_argument("--n-probe", type=int, default=8)
    p.add_argument("--short-aq", type=int, default=1000)
    p.add_argument("--short-pairs", type=int, default=100)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--skip-pairwise", action="store_true")
    p.add_argument("--sweep", default=None, help="semicolon-separated probe,s_aq,s_pairs,topk")
    p.add_argument("--out", default=None, help="jsonl results path")
    p.set_defaults(fn=cmd_search)
    table["search"] = p

    p = subs.add_parser("sweep-report", help="merge sweep rows into a pareto CSV")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--x", default="qps")
    p.add_argument("--y", default="r@10")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep_report)
    table["sweep-report"] = p
    return parser, table


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, table = _build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        if args.config:
            if args.command is None:
                raise ConfigError("--config requires a subcommand")
            _apply_config(table[args.command], _read_config_file(args.config))
            args = parser.parse_args(argv)
        parallel.set_num_threads(args.threads)
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except NeuralVqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
