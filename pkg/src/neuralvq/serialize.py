"""Versioned on-disk artifacts.

Models, quantizers, decoders, and indexes are stored as npz archives with a
kind tag, a format version, and a json metadata blob; raising
DataFormatError on anything that does not match. Code arrays use a compact
binary format: a fixed header (magic, version, n, m, k, model hash) and
packed little-endian codes, one byte per code when k <= 256, two bytes when
k <= 65536.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .baseline import ProductQuantizer, ResidualQuantizer
from .data import NormStats
from .decoders import AdditiveDecoder, IvfCentroidCodes, PairwiseDecoder
from .errors import ConfigError, DataFormatError
from .model import ModelConfig, NeuralRQ
from .search import IvfIndex

FORMAT_VERSION = 1
_CODES_MAGIC = b"NVQC"
_CODES_HEADER = struct.Struct("<4sIQII32s")


def _save(path: str, kind: str, meta: dict, arrays: dict) -> None:
    payload = {f"arr_{k}": np.ascontiguousarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps({"kind": kind, "version": FORMAT_VERSION, **meta}, sort_keys=True).encode(),
        dtype=np.uint8,
    )
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def _load(path: str, kind: str) -> tuple[dict, dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            if "__meta__" not in z:
                raise DataFormatError(f"{path}: not a neuralvq artifact")
            meta = json.loads(bytes(z["__meta__"].tobytes()).decode())
            arrays = {k[4:]: z[k] for k in z.files if k.startswith("arr_")}
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable artifact ({exc})") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: format version {meta.get('version')} unsupported (expected {FORMAT_VERSION})"
        )
    if meta.get("kind") != kind:
        raise DataFormatError(f"{path}: artifact kind {meta.get('kind')!r}, expected {kind!r}")
    return meta, arrays


# -- model -------------------------------------------------------------------


def save_model(path: str, model: NeuralRQ) -> None:
    arrays = {f"param_{i:04d}": p.value for i, p in enumerate(model.params())}
    if model.ivf_centroids is not None:
        arrays["ivf_centroids"] = model.ivf_centroids
    meta = {
        "config": model.config.to_dict(),
        "norm_stats": model.norm_stats.as_dict() if model.norm_stats else None,
        "hash": model.weights_hash(),
    }
    _save(path, "model", meta, arrays)


def load_model(path: str) -> NeuralRQ:
    meta, arrays = _load(path, "model")
    config = ModelConfig.from_dict(meta["config"])
    stats = NormStats.from_dict(meta["norm_stats"]) if meta.get("norm_stats") else None
    model = NeuralRQ.create(config, seed=0, ivf_centroids=arrays.get("ivf_centroids"), norm_stats=stats)
    params = model.params()
    for i, p in enumerate(params):
        key = f"param_{i:04d}"
        if key not in arrays:
            raise DataFormatError(f"{path}: missing parameter {key}")
        if arrays[key].shape != p.value.shape:
            raise DataFormatError(
                f"{path}: parameter {key} has shape {arrays[key].shape}, expected {p.value.shape}"
            )
        p.value[:] = arrays[key]
    if meta.get("hash") and model.weights_hash() != meta["hash"]:
        raise DataFormatError(f"{path}: stored weight hash does not match content")
    return model


# -- classic quantizers --------------------------------------------------------


def save_rq(path: str, rq: ResidualQuantizer) -> None:
    arrays = {f"codebook_{i:03d}": cb for i, cb in enumerate(rq.codebooks)}
    _save(path, "rq", {"m": rq.m, "beam_default": rq.beam_default}, arrays)


def load_rq(path: str) -> ResidualQuantizer:
    meta, arrays = _load(path, "rq")
    books = [arrays[f"codebook_{i:03d}"].astype(np.float32) for i in range(meta["m"])]
    return ResidualQuantizer(books, beam_default=meta.get("beam_default", 1))


def save_pq(path: str, pq: ProductQuantizer) -> None:
    arrays = {f"codebook_{i:03d}": cb for i, cb in enumerate(pq.codebooks)}
    _save(path, "pq", {"m": pq.m, "sub_dims": pq.sub_dims}, arrays)


def load_pq(path: str) -> ProductQuantizer:
    meta, arrays = _load(path, "pq")
    books = [arrays[f"codebook_{i:03d}"].astype(np.float32) for i in range(meta["m"])]
    return ProductQuantizer(books, [int(s) for s in meta["sub_dims"]])


# -- approximate decoders -----------------------------------------------------


def save_additive(path: str, aq: AdditiveDecoder) -> None:
    _save(path, "additive", {}, {"tables": aq.tables})


def load_additive(path: str) -> AdditiveDecoder:
    _, arrays = _load(path, "additive")
    return AdditiveDecoder(arrays["tables"].astype(np.float32))


def _pairwise_arrays(pw: PairwiseDecoder, prefix: str = "") -> dict:
    arrays = {}
    for i, (table, seen) in enumerate(zip(pw.tables, pw.seen)):
        arrays[f"{prefix}table_{i:03d}"] = table
        arrays[f"{prefix}seen_{i:03d}"] = seen
    return arrays


def _pairwise_meta(pw: PairwiseDecoder) -> dict:
    return {
        "pairs": [list(p) for p in pw.pairs],
        "k": pw.k,
        "positions": pw.positions,
        "fit_mse": pw.fit_mse,
    }


def _pairwise_from(meta: dict, arrays: dict, prefix: str = "") -> PairwiseDecoder:
    pairs = [tuple(p) for p in meta["pairs"]]
    tables = [arrays[f"{prefix}table_{i:03d}"].astype(np.float32) for i in range(len(pairs))]
    seen = [arrays[f"{prefix}seen_{i:03d}"].astype(bool) for i in range(len(pairs))]
    return PairwiseDecoder(
        pairs, tables, seen, int(meta["k"]), int(meta["positions"]), list(meta["fit_mse"])
    )


def save_pairwise(path: str, pw: PairwiseDecoder) -> None:
    _save(path, "pairwise", _pairwise_meta(pw), _pairwise_arrays(pw))


def load_pairwise(path: str) -> PairwiseDecoder:
    meta, arrays = _load(path, "pairwise")
    return _pairwise_from(meta, arrays)


# -- index ---------------------------------------------------------------------


def save_index(path: str, index: IvfIndex) -> None:
    arrays = {
        "ids": index.ids,
        "codes": index.codes,
        "buckets": index.buckets,
        "recon_norms": index.recon_norms,
        "aq_tables": index.aq.tables,
        "cc_codes": index.centroid_codes.codes,
    }
    for i, cb in enumerate(index.centroid_codes.rq.codebooks):
        arrays[f"cc_codebook_{i:03d}"] = cb
    meta = {
        "model_hash": index.model_hash,
        "cc_rel_mse": index.centroid_codes.rel_mse,
        "cc_m": index.centroid_codes.rq.m,
        "pairwise": None,
    }
    if index.pairwise is not None:
        meta["pairwise"] = _pairwise_meta(index.pairwise)
        arrays.update(_pairwise_arrays(index.pairwise, prefix="pw_"))
    _save(path, "index", meta, arrays)


def load_index(path: str, model: NeuralRQ) -> IvfIndex:
    meta, arrays = _load(path, "index")
    if model.weights_hash() != meta["model_hash"]:
        raise ConfigError(
            f"{path}: index was built against a different model "
            f"(hash {meta['model_hash'][:12]}..., given {model.weights_hash()[:12]}...)"
        )
    books = [
        arrays[f"cc_codebook_{i:03d}"].astype(np.float32) for i in range(int(meta["cc_m"]))
    ]
    cc = IvfCentroidCodes(
        arrays["cc_codes"].astype(np.int32),
        ResidualQuantizer(books),
        float(meta["cc_rel_mse"]),
    )
    pw = _pairwise_from(meta["pairwise"], arrays, prefix="pw_") if meta["pairwise"] else None
    index = IvfIndex(model, AdditiveDecoder(arrays["aq_tables"].astype(np.float32)), pw, cc)
    index.ids = arrays["ids"].astype(np.int64)
    index.codes = arrays["codes"].astype(np.int32)
    index.buckets = arrays["buckets"].astype(np.int32)
    index.recon_norms = arrays["recon_norms"].astype(np.float32)
    counts = np.bincount(index.buckets, minlength=index.centroids.shape[0])
    index._offsets = np.zeros(index.centroids.shape[0] + 1, dtype=np.int64)
    index._offsets[1:] = np.cumsum(counts)
    return index


# -- packed code files -----------------------------------------------------------


def write_codes(path: str, codes: np.ndarray, k: int, model_hash: str = "") -> None:
    """Write a packed code array; 1 byte per code for k <= 256, else 2."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ConfigError("codes must be (n, m)")
    if codes.size and (codes.min() < 0 or codes.max() >= max(int(k), 1)):
        raise ConfigError(f"codes out of range for k={k}")
    if k <= 256:
        packed = codes.astype("u1")
    elif k <= 65536:
        packed = codes.astype("<u2")
    else:
        raise ConfigError(f"k={k} too large for the packed code format (max 65536)")
    digest = bytes.fromhex(model_hash)[:32] if model_hash else b""
    digest = digest.ljust(32, b"\x00")
    header = _CODES_HEADER.pack(
        _CODES_MAGIC, FORMAT_VERSION, codes.shape[0], codes.shape[1], int(k), digest
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(packed.tobytes())


def read_codes(path: str) -> tuple[np.ndarray, int, str]:
    """Read a packed code file; returns (codes int32, k, model hash hex)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CODES_HEADER.size:
        raise DataFormatError(f"{path}: truncated code file header")
    magic, version, n, m, k, digest = _CODES_HEADER.unpack_from(blob)
    if magic != _CODES_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, not a code file")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: code format version {version} unsupported")
    width = 1 if k <= 256 else 2
    expected = _CODES_HEADER.size + n * m * width
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: payload size {len(blob)} does not match header (expected {expected})"
        )
    dtype = np.dtype("u1") if width == 1 else np.dtype("<u2")
    codes = np.frombuffer(blob, dtype=dtype, offset=_CODES_HEADER.size).reshape(n, m)
    return codes.astype(np.int32), int(k), digest.hex() if any(digest) else ""
