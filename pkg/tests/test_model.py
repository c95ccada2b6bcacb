"""Step network and beam encoder behavior, including reduction identities."""

import numpy as np
import pytest

from neuralvq.autodiff import constant
from neuralvq.baseline import assign_nearest, kmeans
from neuralvq.errors import ConfigError
from neuralvq.model import ModelConfig, NeuralRQ, StepNet


def _net(d, d_e, d_h, depth=2, seed=0, active=True):
    net = StepNet(d, d_e, d_h, depth, np.random.Generator(np.random.PCG64(seed)), "t")
    if active:
        # down-projections start at zero; give them weight so blocks act
        rng = np.random.default_rng(seed + 1)
        for _, down in net.blocks:
            down.value[:] = rng.standard_normal(down.value.shape).astype(np.float32) * 0.1
    return net


def test_config_presets():
    cfg = ModelConfig.preset("S", m=4, k=16, d=8)
    assert (cfg.depth, cfg.d_e, cfg.d_h) == (2, 128, 256)
    cfg = ModelConfig.preset("L", m=4, k=16, d=8)
    assert cfg.depth == 16
    with pytest.raises(ConfigError):
        ModelConfig.preset("XXL", m=4, k=16, d=8)


def test_config_validates():
    with pytest.raises(ConfigError):
        ModelConfig(m=0, k=4, d=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(m=1, k=4, d=4, depth=-1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(m=1, k=4, d=4, a_train=0).validate()


def test_config_dict_roundtrip():
    cfg = ModelConfig(m=3, k=32, d=16, d_e=24, d_h=48, preselect_depth=1, ivf_enabled=True)
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_forward_graph_matches_forward_np():
    net = _net(6, 10, 12, depth=2, seed=3)
    rng = np.random.default_rng(4)
    c = rng.standard_normal((9, 6)).astype(np.float32)
    xhat = rng.standard_normal((9, 6)).astype(np.float32)
    got = net.forward_graph(constant(c), constant(xhat)).value
    np.testing.assert_array_equal(got, net.forward_np(c, xhat))


def test_forward_all_matches_forward_np():
    net = _net(6, 10, 12, depth=2, seed=5)
    rng = np.random.default_rng(6)
    cb = rng.standard_normal((16, 6)).astype(np.float32)
    cand = rng.integers(0, 16, (40, 5)).astype(np.int32)
    xhat = rng.standard_normal((40, 6)).astype(np.float32)
    got = net.forward_all(net.make_cache(cb), cb, cand, xhat)
    want = np.stack([net.forward_np(cb[cand[:, j]], xhat) for j in range(5)], axis=1)
    np.testing.assert_allclose(got, want, rtol=2e-5, atol=2e-6)


def test_forward_all_tiling_invariant():
    # many rows crosses the internal tile boundary; values must not change
    net = _net(4, 8, 8, depth=1, seed=7)
    rng = np.random.default_rng(8)
    cb = rng.standard_normal((8, 4)).astype(np.float32)
    cand = rng.integers(0, 8, (20000, 2)).astype(np.int32)
    xhat = rng.standard_normal((20000, 4)).astype(np.float32)
    cache = net.make_cache(cb)
    full = net.forward_all(cache, cb, cand, xhat)
    head = net.forward_all(cache, cb, cand[:77], xhat[:77])
    np.testing.assert_array_equal(full[:77], head)


def test_identity_net_returns_codewords_bitwise():
    net = _net(5, 5, 7, depth=2, seed=9, active=True)
    net.zero_output_projection()
    rng = np.random.default_rng(10)
    cb = rng.standard_normal((12, 5)).astype(np.float32)
    cand = rng.integers(0, 12, (30, 4)).astype(np.int32)
    xhat = rng.standard_normal((30, 5)).astype(np.float32)
    got = net.forward_all(net.make_cache(cb), cb, cand, xhat)
    np.testing.assert_array_equal(got, cb[cand])


def test_projections_identity_when_dims_match():
    net = StepNet(8, 8, 16, 1, np.random.Generator(np.random.PCG64(0)), "t")
    assert net.in_proj is None and net.out_proj is None
    net2 = StepNet(8, 12, 16, 1, np.random.Generator(np.random.PCG64(0)), "t")
    assert net2.in_proj is not None and net2.out_proj is not None


def test_params_order_is_stable():
    model = NeuralRQ.create(ModelConfig(m=2, k=8, d=4, d_e=6, d_h=8), seed=0)
    names = [p.name for p in model.params()]
    assert names == [p.name for p in model.params()]
    assert names[0] == "step0.codebook"
    assert any("block0" in n for n in names)


def test_encode_decode_loss_consistency():
    cfg = ModelConfig(m=3, k=16, d=8, d_e=8, d_h=16)
    model = NeuralRQ.create(cfg, seed=1)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((500, 8)).astype(np.float32)
    codes, losses = model.encode(x, a=4, b=4)
    recon = model.decode(codes)
    direct = ((x - recon) ** 2).sum(axis=1)
    np.testing.assert_allclose(direct, losses, rtol=1e-5, atol=1e-5)


def test_encode_greedy_equals_beam_one():
    cfg = ModelConfig(m=3, k=16, d=8, d_e=8, d_h=16)
    model = NeuralRQ.create(cfg, seed=3)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((300, 8)).astype(np.float32)
    cg, lg = model.encode_greedy(x, a=6)
    cb, lb = model.encode(x, a=6, b=1)
    np.testing.assert_array_equal(cg, cb)
    np.testing.assert_allclose(lg, lb, rtol=1e-6)


def test_wider_beam_never_hurts():
    cfg = ModelConfig(m=4, k=16, d=8, d_e=8, d_h=16)
    model = NeuralRQ.create(cfg, seed=5)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((400, 8)).astype(np.float32)
    _, l1 = model.encode(x, a=8, b=1)
    _, l8 = model.encode(x, a=8, b=8)
    assert l8.mean() <= l1.mean() + 1e-9


def test_encode_chunking_invariant():
    cfg = ModelConfig(m=2, k=8, d=4, d_e=4, d_h=8)
    model = NeuralRQ.create(cfg, seed=7)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1000, 4)).astype(np.float32)
    codes_all, losses_all = model.encode(x, a=4, b=4)
    parts = [model.encode(x[s : s + 97], a=4, b=4) for s in range(0, 1000, 97)]
    np.testing.assert_array_equal(codes_all, np.concatenate([c for c, _ in parts]))
    np.testing.assert_array_equal(losses_all, np.concatenate([l for _, l in parts]))


def test_ivf_model_leading_column_is_bucket():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((600, 6)).astype(np.float32)
    cents = kmeans(x, 8, iters=5, seed=0)
    cfg = ModelConfig(m=2, k=8, d=6, d_e=6, d_h=8, ivf_enabled=True)
    model = NeuralRQ.create(cfg, seed=1, ivf_centroids=cents)
    codes, _ = model.encode(x, a=4, b=2)
    assert codes.shape == (600, 3)
    np.testing.assert_array_equal(codes[:, 0], assign_nearest(x, cents))
    # decoding from centroid ids only (0 refinement steps) gives the centroid
    recon0 = model.decode(codes, steps=0)
    np.testing.assert_array_equal(recon0, cents[codes[:, 0]])


def test_ivf_model_requires_centroids():
    with pytest.raises(ConfigError):
        NeuralRQ.create(ModelConfig(m=2, k=8, d=4, ivf_enabled=True), seed=0)


def test_decode_steps_prefix():
    cfg = ModelConfig(m=3, k=8, d=4, d_e=4, d_h=8)
    model = NeuralRQ.create(cfg, seed=2)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((50, 4)).astype(np.float32)
    codes, _ = model.encode(x, a=4, b=2)
    np.testing.assert_array_equal(model.decode(codes, steps=2), model.decode(codes[:, :2]))
    with pytest.raises(ConfigError):
        model.decode(codes, steps=5)


def test_encode_validates_shape():
    model = NeuralRQ.create(ModelConfig(m=1, k=4, d=4), seed=0)
    with pytest.raises(ConfigError):
        model.encode(np.zeros((3, 5), dtype=np.float32))
    with pytest.raises(ConfigError):
        model.encode(np.zeros((3, 4), dtype=np.float32), a=0)


def test_preselect_scores_are_plain_distances():
    cfg = ModelConfig(m=1, k=16, d=8, d_e=8, d_h=8)
    model = NeuralRQ.create(cfg, seed=4)
    rng = np.random.default_rng(5)
    r = rng.standard_normal((40, 8)).astype(np.float32)
    cand = model.preselect(0, r, np.zeros_like(r), a=5)
    cb = model.steps[0].pre_codebook.value
    d2 = ((r[:, None, :] - cb[None]) ** 2).sum(axis=2)
    want = np.argsort(d2, axis=1, kind="stable")[:, :5]
    np.testing.assert_array_equal(cand, want)


def test_weights_hash_tracks_mutation():
    model = NeuralRQ.create(ModelConfig(m=1, k=4, d=4), seed=0)
    h0 = model.weights_hash()
    assert h0 == model.weights_hash()
    model.steps[0].codebook.value[0, 0] += 1.0
    assert model.weights_hash() != h0
