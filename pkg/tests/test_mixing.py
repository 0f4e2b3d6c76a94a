import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import unit_rows
from mmmix.errors import DegenerateError, DomainError
from mmmix.geometry import PointCloud
from mmmix.mixing import (MixedPair, MixLog, MixMask, build_mask, feature_mix, input_mix, make_pairing, mix_batch,
                          mix_batch_backward, sample_lambda)


def test_uniform_lambda_moments():
    rng = np.random.default_rng(0)
    draws = np.array([sample_lambda(1.0, rng) for _ in range(100_000)])
    assert 0.49 <= draws.mean() <= 0.51
    assert 0.080 <= draws.var() <= 0.087
    assert np.all((draws > 0) & (draws < 1))


def test_small_beta_avoids_the_middle():
    def middle(beta):
        rng = np.random.default_rng(1)
        d = np.array([sample_lambda(beta, rng) for _ in range(100_000)])
        return np.mean((d > 0.4) & (d < 0.6))

    assert middle(0.2) < middle(5.0)


def test_sample_lambda_rejects_nonpositive_beta():
    for beta in (0.0, -1.0):
        with pytest.raises(DomainError):
            sample_lambda(beta, np.random.default_rng(0))


def test_pairing_examples():
    assert make_pairing(2, np.random.default_rng(0)).tolist() == [1, 0]
    for seed in range(50):
        pi = make_pairing(5, np.random.default_rng(seed))
        assert sorted(pi.tolist()) == [0, 1, 2, 3, 4]
        assert all(pi[i] != i for i in range(5))
    with pytest.raises(DomainError):
        make_pairing(1, np.random.default_rng(0))


def test_pairing_reaches_every_derangement_of_four():
    oracle = {p for p in itertools.permutations(range(4)) if all(p[i] != i for i in range(4))}
    assert len(oracle) == 9
    rng = np.random.default_rng(7)
    seen = {tuple(make_pairing(4, rng).tolist()) for _ in range(10_000)}
    assert seen == oracle


def test_mask_examples():
    rng = np.random.default_rng(0)
    assert build_mask(1024, 0.3, rng).n_from_first == 307
    full = build_mask(10, 1.0, rng)
    assert full.s.tolist() == [1] * 10 and full.realized_lambda == 1.0
    empty = build_mask(10, 0.05, rng)
    assert empty.n_from_first == 0 and empty.realized_lambda == 0.0
    with pytest.raises(DomainError):
        build_mask(10, 1.5, rng)
    with pytest.raises(DomainError):
        build_mask(10, -0.1, rng)
    with pytest.raises(DomainError):
        build_mask(0, 0.5, rng)


def test_input_mix_examples():
    rng = np.random.default_rng(0)
    p1 = PointCloud(rng.normal(size=(4, 3)), 1, 10)
    p2 = PointCloud(rng.normal(size=(4, 3)), 2, 20)
    assert np.array_equal(input_mix(p1, p2, MixMask(np.ones(4))).points, p1.points)
    assert np.array_equal(input_mix(p1, p2, MixMask(np.zeros(4))).points, p2.points)
    out = input_mix(p1, p2, MixMask([1, 1, 1, 0]))
    assert np.array_equal(out.points[:3], p1.points[:3])
    assert np.array_equal(out.points[3], p2.points[3])
    assert out.mask.realized_lambda == 0.75
    assert out.classes == (1, 2) and out.ids == (10, 20)
    with pytest.raises(DomainError):
        input_mix(p1, PointCloud(np.zeros((5, 3)), 0), MixMask(np.ones(4)))


def test_mixed_pair_lambda_must_match_mask():
    mask = MixMask([1, 0, 0, 0])
    MixedPair(0, 1, 0.25, mask)
    with pytest.raises(DomainError):
        MixedPair(0, 1, 0.3, mask)


def test_feature_mix_examples():
    f, g = np.array([0.6, 0.8]), np.array([1.0, 0.0])
    assert np.array_equal(feature_mix(f, g, 1.0), f)
    np.testing.assert_array_equal(feature_mix([1, 0], [0, 1], 0.5), [0.5, 0.5])
    np.testing.assert_allclose(feature_mix([1, 0], [0, 1], 0.5, True), [math.sqrt(2) / 2] * 2, atol=1e-15)
    with pytest.raises(DomainError):
        feature_mix([1, 0], [1, 0, 0], 0.5)
    with pytest.raises(DegenerateError):
        feature_mix([1, 0], [-1, 0], 0.5, True)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_feature_mix_fixed_point(lam, d, seed):
    f = np.random.default_rng(seed).normal(size=d)
    np.testing.assert_allclose(feature_mix(f, f, lam), f, rtol=1e-15, atol=1e-15)


def test_mixing_invariants_1000_cases():
    rng = np.random.default_rng(99)
    for case in range(1000):
        n = int(rng.integers(1, 300))
        lam = float(rng.uniform()) if case % 10 else float(rng.integers(0, 2))
        mask = build_mask(n, lam, rng)
        assert mask.n_from_first == math.floor(lam * n)
        assert mask.realized_lambda == mask.s.sum() / n
        p1 = PointCloud(rng.normal(size=(n, 3)), 0)
        p2 = PointCloud(rng.normal(size=(n, 3)), 1)
        out = input_mix(p1, p2, mask).points
        from_p1 = np.all(out == p1.points, axis=1)
        from_p2 = np.all(out == p2.points, axis=1)
        assert np.all(from_p1 | from_p2)
        assert int(from_p1.sum()) == mask.n_from_first


def test_mix_batch_logs_shared_pairs():
    rng = np.random.default_rng(0)
    feats = unit_rows(rng, 4, 6)
    pairs = [MixedPair(i, (i + 1) % 4, 0.25 * i) for i in range(4)]
    log = MixLog()
    for key in "PIT":
        mix_batch(feats, pairs, True, log, step=3, stage="1", modality=key)
    assert len(log.rows) == 12
    by_sample = {}
    for step, i, j, lam, *_rest, mod in log.rows:
        by_sample.setdefault(i, set()).add((step, j, lam))
    assert all(len(v) == 1 for v in by_sample.values())


@pytest.mark.parametrize("renorm", [False, True])
def test_mix_batch_backward_matches_finite_differences(renorm):
    rng = np.random.default_rng(4)
    n, d = 5, 4
    feats = unit_rows(rng, n, d)
    pi = make_pairing(n, rng)
    pairs = [MixedPair(i, int(pi[i]), float(rng.uniform())) for i in range(n)]
    u = rng.normal(size=(n, d))
    bm = mix_batch(feats, pairs, renorm)
    analytic = mix_batch_backward(u, bm, pairs, n)
    h = 1e-6
    num = np.zeros_like(feats)
    for idx in np.ndindex(feats.shape):
        f = feats.copy()
        f[idx] += h
        up = (mix_batch(f, pairs, renorm).mixed * u).sum()
        f[idx] -= 2 * h
        dn = (mix_batch(f, pairs, renorm).mixed * u).sum()
        num[idx] = (up - dn) / (2 * h)
    np.testing.assert_allclose(analytic, num, atol=1e-8)
