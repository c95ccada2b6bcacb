"""Additive and pairwise decoders against dense least-squares oracles."""

import numpy as np
import pytest

from neuralvq.decoders import (
    AdditiveDecoder,
    PairwiseDecoder,
    _pair_candidates,
    fit_additive_lstsq,
    fit_additive_sequential,
    fit_pairs_fixed,
    pair_index,
    quantize_ivf_centroids,
    select_pairs_greedy,
)
from neuralvq.errors import ConfigError, NumericalError


def _random_problem(seed, n=400, m=3, k=5, d=4):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, k, (n, m)).astype(np.int32)
    x = rng.standard_normal((n, d)).astype(np.float32)
    return codes, x, k


def test_pair_index():
    np.testing.assert_array_equal(
        pair_index(np.array([0, 1, 2]), np.array([3, 0, 2]), 4), [3, 4, 10]
    )


def test_additive_decode_is_table_sum():
    rng = np.random.default_rng(0)
    tables = rng.standard_normal((2, 4, 3)).astype(np.float32)
    aq = AdditiveDecoder(tables)
    codes = np.array([[1, 3], [0, 0]])
    want = tables[0][codes[:, 0]] + tables[1][codes[:, 1]]
    np.testing.assert_array_equal(aq.decode(codes), want)
    assert aq.m == 2 and aq.k == 4


def test_additive_luts_are_inner_products():
    rng = np.random.default_rng(1)
    tables = rng.standard_normal((3, 5, 6)).astype(np.float32)
    aq = AdditiveDecoder(tables)
    q = rng.standard_normal(6).astype(np.float32)
    luts = aq.luts(q)
    np.testing.assert_allclose(luts, np.einsum("mkd,d->mk", tables, q), rtol=1e-5)
    codes = rng.integers(0, 5, (7, 3)).astype(np.int32)
    want = np.einsum("nd,d->n", aq.decode(codes), q)
    np.testing.assert_allclose(aq.lut_sums(luts, codes), want, rtol=1e-4, atol=1e-4)


def _dense_lstsq_oracle(codes, x, k, lam):
    """Normal equations on the explicit one-hot design, float64."""
    n, m = codes.shape
    design = np.zeros((n, m * k))
    for mi in range(m):
        design[np.arange(n), mi * k + codes[:, mi]] = 1.0
    gram = design.T @ design + lam * n * np.eye(m * k)
    sol = np.linalg.solve(gram, design.T @ x.astype(np.float64))
    return sol.reshape(m, k, -1)


def test_fit_additive_lstsq_matches_dense_oracle():
    codes, x, k = _random_problem(2)
    aq = fit_additive_lstsq(codes, x, k)
    want = _dense_lstsq_oracle(codes, x, k, 1e-6)
    np.testing.assert_allclose(aq.tables, want, rtol=1e-4, atol=1e-5)


def test_fit_additive_lstsq_single_position_unregularized():
    codes, x, k = _random_problem(3, m=1)
    aq = fit_additive_lstsq(codes, x, k, ridge=0.0)
    # one position: exact per-code group means
    for c in range(k):
        rows = codes[:, 0] == c
        if rows.any():
            np.testing.assert_allclose(aq.tables[0][c], x[rows].mean(axis=0), atol=1e-5)


def test_fit_additive_lstsq_singular_raises():
    codes, x, k = _random_problem(4, m=2)
    with pytest.raises(NumericalError, match="ridge"):
        fit_additive_lstsq(codes, x, k, ridge=0.0)  # rank-deficient for m >= 2


def test_fit_additive_lstsq_validates():
    with pytest.raises(ConfigError):
        fit_additive_lstsq(np.zeros((0, 2), dtype=np.int32), np.zeros((0, 3)), 4)


def test_fit_additive_sequential_group_means():
    codes, x, k = _random_problem(5, m=2)
    aq = fit_additive_sequential(codes, x, k)
    resid = x.astype(np.float64)
    for mi in range(2):
        for c in range(k):
            rows = codes[:, mi] == c
            if rows.any():
                np.testing.assert_allclose(
                    aq.tables[mi][c], resid[rows].mean(axis=0), atol=1e-5
                )
        resid = resid - aq.tables[mi][codes[:, mi]]


def test_lstsq_fit_at_least_as_good_as_sequential():
    codes, x, k = _random_problem(6, n=600, m=3)
    seq = fit_additive_sequential(codes, x, k)
    joint = fit_additive_lstsq(codes, x, k)
    mse_seq = ((x - seq.decode(codes)) ** 2).sum(axis=1).mean()
    mse_joint = ((x - joint.decode(codes)) ** 2).sum(axis=1).mean()
    assert mse_joint <= mse_seq + 1e-4


def test_pair_candidates_enumeration():
    assert _pair_candidates(3) == [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def test_fit_pairs_fixed_cell_means_oracle():
    codes, x, k = _random_problem(7, m=2)
    pw = fit_pairs_fixed(codes, x, [(0, 1)], k)
    assert pw.tables[0].shape == (k * k, x.shape[1])
    addr = codes[:, 0] * k + codes[:, 1]
    for cell in range(k * k):
        rows = addr == cell
        if rows.any():
            np.testing.assert_allclose(pw.tables[0][cell], x[rows].mean(axis=0), atol=1e-5)
        else:
            assert not pw.seen[0][cell]
            np.testing.assert_array_equal(pw.tables[0][cell], 0.0)


def test_fit_pairs_diagonal_uses_small_table():
    codes, x, k = _random_problem(8, m=2)
    pw = fit_pairs_fixed(codes, x, [(0, 0), (1, 1)], k)
    assert pw.tables[0].shape == (k, x.shape[1])
    assert pw.tables[1].shape == (k, x.shape[1])


def test_pairwise_decode_validates_positions():
    codes, x, k = _random_problem(9, m=2)
    pw = fit_pairs_fixed(codes, x, [(0, 1)], k)
    with pytest.raises(ConfigError):
        pw.decode(np.zeros((2, 3), dtype=np.int32))


def test_unseen_cells_decode_to_zero_and_count():
    k = 3
    codes = np.array([[0, 0], [1, 1]], dtype=np.int32)
    x = np.ones((2, 2), dtype=np.float32)
    pw = fit_pairs_fixed(codes, x, [(0, 1)], k)
    out = pw.decode(np.array([[2, 2]], dtype=np.int32))  # never fitted
    np.testing.assert_array_equal(out, 0.0)
    assert pw.unseen_hits == 1


def test_greedy_first_pick_matches_exhaustive_gain():
    codes, x, k = _random_problem(10, n=300, m=2)
    pw = select_pairs_greedy(codes, x, n_pairs=1, k=k)
    gains = {}
    for pair in _pair_candidates(2):
        i, j = pair
        addr = codes[:, i] if i == j else codes[:, i] * k + codes[:, j]
        size = k if i == j else k * k
        g = 0.0
        for cell in range(size):
            rows = addr == cell
            if rows.any():
                s = x[rows].astype(np.float64).sum(axis=0)
                g += float((s @ s) / rows.sum())
        gains[pair] = g
    assert pw.pairs[0] == max(gains, key=lambda p: (gains[p], -p[0] - p[1]))


def test_greedy_fit_mse_non_increasing():
    codes, x, k = _random_problem(11, n=500, m=3)
    pw = select_pairs_greedy(codes, x, n_pairs=6, k=k)
    mses = np.array(pw.fit_mse)
    assert (np.diff(mses) <= 1e-9).all()
    final = ((x - pw.decode(codes)) ** 2).sum(axis=1).mean()
    assert final == pytest.approx(mses[-1], rel=1e-3, abs=1e-4)


def test_pairwise_beats_additive_on_correlated_codes():
    # the target depends on the code pair in a way no per-position sum can fit
    rng = np.random.default_rng(12)
    k = 4
    c0 = rng.integers(0, k, 2000)
    c1 = rng.integers(0, k, 2000)
    codes = np.stack([c0, c1], axis=1).astype(np.int32)
    x = np.where((c0 == c1)[:, None], 1.0, -1.0).astype(np.float32)
    add = fit_additive_lstsq(codes, x, k)
    pw = fit_pairs_fixed(codes, x, [(0, 1)], k)
    mse_add = ((x - add.decode(codes)) ** 2).mean()
    mse_pw = ((x - pw.decode(codes)) ** 2).mean()
    assert mse_pw < 1e-6 < mse_add


def test_select_pairs_greedy_validates():
    with pytest.raises(ConfigError):
        select_pairs_greedy(np.zeros((0, 2), dtype=np.int32), np.zeros((0, 2)), 1, 4)
    codes, x, k = _random_problem(13, m=2)
    with pytest.raises(ConfigError):
        select_pairs_greedy(codes, x, 1, k, candidates=[(1, 0)])  # i > j


def test_quantize_ivf_centroids_hits_target():
    rng = np.random.default_rng(14)
    cents = rng.standard_normal((64, 8)).astype(np.float32)
    cc = quantize_ivf_centroids(cents, k=16, target_rel_mse=1e-3)
    assert cc.rel_mse < 1e-3
    assert cc.codes.shape == (64, cc.m_tilde)
    recon = cc.rq.decode(cc.codes)
    rel = ((cents - recon) ** 2).sum(axis=1) / (cents**2).sum(axis=1)
    assert rel.mean() == pytest.approx(cc.rel_mse, rel=1e-3)
    np.testing.assert_array_equal(cc.expand(np.array([3, 3, 0])), cc.codes[[3, 3, 0]])


def test_quantize_ivf_centroids_caps_steps():
    rng = np.random.default_rng(15)
    cents = rng.standard_normal((32, 6)).astype(np.float32)
    cc = quantize_ivf_centroids(cents, k=2, target_rel_mse=1e-12, max_steps=3)
    assert cc.m_tilde == 3
    assert cc.rel_mse > 0
