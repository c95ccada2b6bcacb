"""Artifact files: roundtrips preserve behavior, malformed files are rejected."""

import numpy as np
import pytest

from neuralvq import serialize
from neuralvq.baseline import ProductQuantizer, ResidualQuantizer, kmeans
from neuralvq.data import fit_norm
from neuralvq.decoders import (
    fit_additive_sequential,
    fit_pairs_fixed,
    quantize_ivf_centroids,
    select_pairs_greedy,
)
from neuralvq.errors import ConfigError, DataFormatError
from neuralvq.model import ModelConfig, NeuralRQ
from neuralvq.search import IvfIndex, SearchParams


def _sample(seed=0, n=200, d=6):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)).astype(np.float32)


def _model(seed=0, ivf=False, stats=None, d=6):
    cfg = ModelConfig(
        m=2, k=8, d=d, d_e=d, d_h=12, depth=1,
        a_train=4, b_train=2, a_eval=4, b_eval=2, ivf_enabled=ivf,
    )
    centroids = kmeans(_sample(seed + 1, d=d), 3, iters=5, seed=seed) if ivf else None
    return NeuralRQ.create(cfg, seed=seed, ivf_centroids=centroids, norm_stats=stats)


def test_model_roundtrip(tmp_path):
    x = _sample()
    model = _model(ivf=True, stats=fit_norm(x))
    path = str(tmp_path / "model.npz")
    serialize.save_model(path, model)
    loaded = serialize.load_model(path)
    assert loaded.weights_hash() == model.weights_hash()
    assert loaded.norm_stats.as_dict() == model.norm_stats.as_dict()
    codes, losses = model.encode(x)
    codes2, losses2 = loaded.encode(x)
    np.testing.assert_array_equal(codes, codes2)
    np.testing.assert_array_equal(losses, losses2)


def test_model_tampered_weights_rejected(tmp_path):
    model = _model()
    path = str(tmp_path / "model.npz")
    serialize.save_model(path, model)
    with np.load(path, allow_pickle=False) as z:
        payload = {k: z[k] for k in z.files}
    tampered = payload["arr_param_0000"].copy()
    tampered.flat[0] += 1.0
    payload["arr_param_0000"] = tampered
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    with pytest.raises(DataFormatError, match="hash"):
        serialize.load_model(path)


def test_wrong_kind_rejected(tmp_path):
    x = _sample()
    rq = ResidualQuantizer.train(x, m=2, k=4, seed=0)
    path = str(tmp_path / "artifact.npz")
    serialize.save_rq(path, rq)
    with pytest.raises(DataFormatError, match="kind"):
        serialize.load_model(path)


def test_unsupported_version_rejected(tmp_path, monkeypatch):
    x = _sample()
    rq = ResidualQuantizer.train(x, m=2, k=4, seed=0)
    path = str(tmp_path / "artifact.npz")
    serialize.save_rq(path, rq)
    monkeypatch.setattr(serialize, "FORMAT_VERSION", 99)
    with pytest.raises(DataFormatError, match="version"):
        serialize.load_rq(path)


def test_non_artifact_files_rejected(tmp_path):
    bare = str(tmp_path / "bare.npz")
    with open(bare, "wb") as fh:
        np.savez(fh, stuff=np.arange(3))
    with pytest.raises(DataFormatError, match="not a neuralvq artifact"):
        serialize.load_model(bare)
    junk = str(tmp_path / "junk.npz")
    with open(junk, "wb") as fh:
        fh.write(b"definitely not a zip")
    with pytest.raises(DataFormatError, match="unreadable"):
        serialize.load_model(junk)


def test_rq_roundtrip(tmp_path):
    x = _sample(1)
    rq = ResidualQuantizer.train(x, m=3, k=5, seed=1, beam_default=4)
    path = str(tmp_path / "rq.npz")
    serialize.save_rq(path, rq)
    loaded = serialize.load_rq(path)
    assert loaded.beam_default == rq.beam_default
    np.testing.assert_array_equal(loaded.encode(x), rq.encode(x))


def test_pq_roundtrip(tmp_path):
    x = _sample(2, d=7)
    pq = ProductQuantizer.train(x, m=3, k=4, seed=0)
    path = str(tmp_path / "pq.npz")
    serialize.save_pq(path, pq)
    loaded = serialize.load_pq(path)
    assert loaded.sub_dims == pq.sub_dims
    np.testing.assert_array_equal(loaded.encode(x), pq.encode(x))


def test_additive_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    codes = rng.integers(0, 5, (100, 2)).astype(np.int32)
    x = _sample(3, n=100)
    aq = fit_additive_sequential(codes, x, 5)
    path = str(tmp_path / "aq.npz")
    serialize.save_additive(path, aq)
    loaded = serialize.load_additive(path)
    np.testing.assert_array_equal(loaded.decode(codes), aq.decode(codes))


def test_pairwise_roundtrip_keeps_unitary_and_cross_tables(tmp_path):
    rng = np.random.default_rng(4)
    codes = rng.integers(0, 4, (120, 3)).astype(np.int32)
    x = _sample(4, n=120)
    pw = fit_pairs_fixed(codes, x, [(0, 0), (0, 2), (1, 2)], 4)
    path = str(tmp_path / "pw.npz")
    serialize.save_pairwise(path, pw)
    loaded = serialize.load_pairwise(path)
    assert loaded.pairs == pw.pairs
    assert loaded.fit_mse == pytest.approx(pw.fit_mse)
    np.testing.assert_array_equal(loaded.decode(codes), pw.decode(codes))
    assert loaded.unseen_hits == 0


def _index(seed=0, n=150):
    x = _sample(seed, n=n)
    model = _model(seed=seed, ivf=True)
    codes, _ = model.encode(x)
    buckets, body = codes[:, 0], codes[:, 1:]
    resid = x - model.ivf_centroids[buckets]
    aq = fit_additive_sequential(body, resid, model.config.k)
    cc = quantize_ivf_centroids(model.ivf_centroids, 3, target_rel_mse=1e-6, max_steps=3)
    ext = np.concatenate([body, cc.expand(buckets)], axis=1)
    pw = select_pairs_greedy(ext, resid, n_pairs=2, k=model.config.k)
    index = IvfIndex(model, aq, pw, cc)
    index.add(x)
    return index, model, x


def test_index_roundtrip(tmp_path):
    index, model, x = _index()
    path = str(tmp_path / "index.npz")
    serialize.save_index(path, index)
    loaded = serialize.load_index(path, model)
    params = SearchParams(n_probe=3, n_short_aq=80, n_short_pairs=20, topk=5)
    ids, dists, _ = index.query_batch(x[:6], params)
    ids2, dists2, _ = loaded.query_batch(x[:6], params)
    np.testing.assert_array_equal(ids, ids2)
    np.testing.assert_array_equal(dists, dists2)


def test_index_roundtrip_without_pairwise(tmp_path):
    index, model, x = _index(seed=5)
    index.pairwise = None
    path = str(tmp_path / "index.npz")
    serialize.save_index(path, index)
    loaded = serialize.load_index(path, model)
    assert loaded.pairwise is None
    params = SearchParams(n_probe=3, n_short_aq=80, n_short_pairs=20, topk=5)
    ids, dists, _ = index.query_batch(x[:4], params, skip_pairwise=True)
    ids2, dists2, _ = loaded.query_batch(x[:4], params, skip_pairwise=True)
    np.testing.assert_array_equal(ids, ids2)
    np.testing.assert_array_equal(dists, dists2)


def test_index_rejects_mismatched_model(tmp_path):
    index, model, _ = _index()
    path = str(tmp_path / "index.npz")
    serialize.save_index(path, index)
    other = _model(seed=9, ivf=True)
    with pytest.raises(ConfigError, match="different model"):
        serialize.load_index(path, other)


def test_codes_roundtrip_one_byte(tmp_path):
    rng = np.random.default_rng(6)
    codes = rng.integers(0, 256, (40, 3)).astype(np.int32)
    path = str(tmp_path / "codes.nvqc")
    digest = "ab" * 32
    serialize.write_codes(path, codes, 256, model_hash=digest)
    got, k, h = serialize.read_codes(path)
    np.testing.assert_array_equal(got, codes)
    assert got.dtype == np.int32 and k == 256 and h == digest
    # 1 byte per code for k <= 256
    import os
    assert os.path.getsize(path) == serialize._CODES_HEADER.size + codes.size


def test_codes_roundtrip_two_bytes(tmp_path):
    rng = np.random.default_rng(7)
    codes = rng.integers(0, 1000, (30, 2)).astype(np.int32)
    path = str(tmp_path / "codes.nvqc")
    serialize.write_codes(path, codes, 1000)
    got, k, h = serialize.read_codes(path)
    np.testing.assert_array_equal(got, codes)
    assert k == 1000 and h == ""


def test_codes_validation():
    with pytest.raises(ConfigError, match="out of range"):
        serialize.write_codes("/dev/null", np.array([[0, 5]]), 4)
    with pytest.raises(ConfigError, match="out of range"):
        serialize.write_codes("/dev/null", np.array([[-1, 0]]), 4)
    with pytest.raises(ConfigError, match="too large"):
        serialize.write_codes("/dev/null", np.array([[0]]), 1 << 20)
    with pytest.raises(ConfigError, match=r"\(n, m\)"):
        serialize.write_codes("/dev/null", np.arange(4), 4)


def test_codes_malformed_files_rejected(tmp_path):
    codes = np.array([[1, 2], [3, 0]], dtype=np.int32)
    path = str(tmp_path / "codes.nvqc")
    serialize.write_codes(path, codes, 4)
    blob = open(path, "rb").read()

    short = str(tmp_path / "short.nvqc")
    open(short, "wb").write(blob[:10])
    with pytest.raises(DataFormatError, match="truncated"):
        serialize.read_codes(short)

    magic = str(tmp_path / "magic.nvqc")
    open(magic, "wb").write(b"XXXX" + blob[4:])
    with pytest.raises(DataFormatError, match="magic"):
        serialize.read_codes(magic)

    padded = str(tmp_path / "padded.nvqc")
    open(padded, "wb").write(blob + b"\x00")
    with pytest.raises(DataFormatError, match="payload size"):
        serialize.read_codes(padded)
