import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierloc.descriptors import FeatureLevel, FeaturePyramid
from hierloc.msgv import (MSGVConfig, consistency_matrix, fitness_score, leading_eigenvector,
                          leading_eigenvectors, match_scale, nearest_neighbours, normalize_sorted,
                          rerank, scale_artifacts, thin_level)
from tests.helpers import random_rotation


def level(desc, cents=None, seed=0):
    desc = np.asarray(desc, dtype=np.float64)
    desc = desc / np.linalg.norm(desc, axis=1, keepdims=True)
    if cents is None:
        cents = np.random.default_rng(seed).uniform(-20, 20, (len(desc), 3))
    return FeatureLevel(np.arange(len(desc)), np.asarray(cents, dtype=np.float64), desc)


def planted_consistency(n, inlier_frac, seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-20, 20, (n, 3))
    p = q @ random_rotation(rng).T + rng.uniform(-5, 5, 3)
    n_in = int(round(inlier_frac * n))
    p[n_in:] = rng.uniform(-20, 20, (n - n_in, 3))
    return q, p, n_in


# -- matching ----------------------------------------------------------------

def test_identical_sets_self_match():
    rng = np.random.default_rng(0)
    f = level(rng.normal(size=(30, 16)))
    corr = match_scale(f, f, 30)
    assert np.array_equal(np.sort(corr.q_index), np.arange(30))
    assert np.array_equal(corr.q_index, corr.p_index)
    assert np.allclose(corr.distances, 0, atol=1e-7)


def test_lambda_one_keeps_best_pair():
    rng = np.random.default_rng(1)
    fq, fp = level(rng.normal(size=(20, 8)), seed=1), level(rng.normal(size=(25, 8)), seed=2)
    corr = match_scale(fq, fp, 1)
    full = match_scale(fq, fp, 20)
    assert len(corr) == 1 and corr.q_index[0] == full.q_index[0]


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(31)
    fq, fp = level(rng.normal(size=(300, 16)), seed=3), level(rng.normal(size=(280, 16)), seed=4)
    corr = match_scale(fq, fp, 128)
    pairs = []
    for i, a in enumerate(fq.descriptors):
        d = [math.dist(a, b) for b in fp.descriptors]
        j = int(np.argmin(d))
        pairs.append((d[j], i, j))
    pairs.sort()
    oracle = pairs[:128]
    assert corr.q_index.tolist() == [i for _, i, _ in oracle]
    assert corr.p_index.tolist() == [j for _, _, j in oracle]
    assert np.allclose(corr.distances, [d for d, _, _ in oracle], atol=1e-9)
    assert np.all(np.diff(corr.distances) >= 0)


def test_nearest_neighbour_ties_go_to_lowest_index():
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0], [0.0, -1.0]])
    idx, dist = nearest_neighbours(a, b)
    assert idx[0] == 0 and dist[0] == pytest.approx(math.sqrt(2))


def test_match_errors():
    f = level(np.eye(4))
    empty = FeatureLevel(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 4)))
    with pytest.raises(ValueError):
        match_scale(f, empty, 4)
    with pytest.raises(ValueError):
        match_scale(f, f, 0)


def test_thin_level_spreads_and_caps():
    f = level(np.random.default_rng(2).normal(size=(1000, 8)))
    t = thin_level(f, 100)
    assert len(t) == 100 and t.keys[0] == 0 and t.keys[-1] == 999
    assert thin_level(f, None) is f and thin_level(f, 5000) is f


# -- consistency matrix ------------------------------------------------------

def test_unit_values():
    q = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    assert consistency_matrix(q, q + 3.0, 1.6)[0, 1] == 1.0
    p = np.array([[0.0, 0, 0], [6.6, 0, 0]])
    assert consistency_matrix(q, p, 1.6)[0, 1] == pytest.approx(0.0, abs=1e-12)
    q = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    p = np.array([[0.0, 0, 0], [0.0, 12.0, 0]])
    m = consistency_matrix(q, p, 5.0)
    assert m[0, 1] == pytest.approx(0.84, abs=1e-15) and m[1, 0] == m[0, 1]


def test_matrix_structure():
    q, p, _ = planted_consistency(64, 0.5, 3)
    m = consistency_matrix(q, p, 1.6)
    assert np.array_equal(m, m.T)
    assert np.all(np.diag(m) == 1.0)
    assert m.min() >= 0 and m.max() <= 1


def test_matrix_errors():
    q = np.zeros((3, 3))
    with pytest.raises(ValueError):
        consistency_matrix(q, q, 0.0)
    with pytest.raises(ValueError):
        consistency_matrix(q[:1], q[:1], 1.0)
    with pytest.raises(ValueError):
        consistency_matrix(q, q[:2], 1.0)


def test_rigid_invariance():
    rng = np.random.default_rng(4)
    q, p, _ = planted_consistency(50, 0.4, 4)
    m = consistency_matrix(q, p, 1.6)
    R, t = random_rotation(rng), rng.uniform(-50, 50, 3)
    assert np.abs(consistency_matrix(q @ R.T + t, p, 1.6) - m).max() < 1e-9


# -- leading eigenvector -----------------------------------------------------

def test_two_by_two():
    v = leading_eigenvector(np.array([[1.0, 0.9], [0.9, 1.0]])).vector
    assert np.allclose(v, [2 ** -0.5, 2 ** -0.5], atol=1e-8)


def test_identity_gives_uniform_vector():
    res = leading_eigenvector(np.eye(5))
    assert np.allclose(res.vector, np.full(5, 5 ** -0.5)) and res.converged


def test_matches_dense_eigensolver():
    q, p, _ = planted_consistency(8, 0.5, 37)
    m = consistency_matrix(q, p, 5.0)
    w, V = np.linalg.eigh(m)
    ref = np.abs(V[:, -1])
    res = leading_eigenvector(m)
    assert np.abs(res.vector - ref).max() < 1e-6
    assert np.linalg.norm(m @ res.vector - w[-1] * res.vector) <= 1e-8 * np.linalg.norm(m) * 10
    assert w[-1] >= m.sum(axis=1).mean() - 1e-12


def test_batched_padding_matches_single():
    mats = [consistency_matrix(*planted_consistency(n, 0.5, n)[:2], 1.6) for n in (10, 25, 40)]
    stack = np.zeros((3, 40, 40))
    for i, m in enumerate(mats):
        stack[i, :len(m), :len(m)] = m
    batch = leading_eigenvectors(stack)
    for i, m in enumerate(mats):
        assert np.abs(batch.vector[i, :len(m)] - leading_eigenvector(m).vector).max() < 1e-12
        assert np.all(batch.vector[i, len(m):] == 0)


def test_eigen_errors():
    with pytest.raises(ValueError):
        leading_eigenvector(np.array([[1.0, 0.2], [0.3, 1.0]]))
    with pytest.raises(ValueError):
        leading_eigenvector(np.eye(2), tol=0)
    assert not leading_eigenvector(consistency_matrix(*planted_consistency(30, 0.5, 1)[:2], 1.6),
                                   max_iter=1).converged


def test_planted_inliers_score_higher():
    wins = 0
    for seed in range(100):
        q, p, n_in = planted_consistency(256, 0.3, seed)
        v = leading_eigenvector(consistency_matrix(q, p, 1.6)).vector
        wins += v[:n_in].mean() > v[n_in:].mean()
    assert wins >= 99


# -- normalisation and fitness -----------------------------------------------

def test_normalize_sorted_examples():
    assert np.allclose(normalize_sorted([0.2, 0.8, 0.5]), [1.0, 0.5, 0.0])
    assert np.array_equal(normalize_sorted([0.3, 0.3, 0.3]), [1, 1, 1])
    v = np.random.default_rng(41).uniform(size=512)
    n = normalize_sorted(v)
    assert n[0] == 1 and n[-1] == 0 and np.all(np.diff(n) <= 0)
    assert np.allclose(n, (np.sort(v)[::-1] - v.min()) / np.ptp(v))


def test_fitness_examples():
    assert fitness_score([np.ones(8), np.ones(4)], [8, 4]).beta == 1.0
    e = [np.eye(8)[0], np.eye(4)[0]]
    r = fitness_score(e, [8, 4], head_fraction=0.5)
    # heads of 4 and 2 entries: means 1/4 and 1/2
    assert r.beta == pytest.approx(0.5 * 0.25 + 0.5 * 0.5) and r.beta < 1
    assert r.per_scale == pytest.approx([0.25, 0.5])
    two = fitness_score([np.full(4, 0.4), np.full(4, 0.8)], [4, 4], head_fraction=1.0)
    assert two.beta == pytest.approx(0.6)


def test_fitness_errors():
    with pytest.raises(ValueError):
        fitness_score([np.ones(3)], [3, 3])
    with pytest.raises(ValueError):
        fitness_score([np.ones(3), np.ones(3)], [3, 3], weights=[0.7, 0.7])
    with pytest.raises(ValueError):
        fitness_score([np.ones(3)], [3], head_fraction=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_beta_monotone(seed, frac):
    rng = np.random.default_rng(seed)
    vs = [np.sort(rng.uniform(size=n))[::-1] for n in (16, 8)]
    bumped = [np.minimum(v + rng.uniform(0, 0.2, len(v)), 1.0) for v in vs]
    a = fitness_score(vs, [16, 8], head_fraction=frac).beta
    b = fitness_score(bumped, [16, 8], head_fraction=frac).beta
    assert 0 <= a <= b + 1e-12 <= 1 + 1e-12


def test_scale_artifacts_chain():
    rng = np.random.default_rng(6)
    f = level(rng.normal(size=(40, 8)))
    art = scale_artifacts(f, f, 32, 1.6, level=1)
    assert art.matrix.shape == (32, 32)
    assert art.normalized[0] == 1.0
    assert scale_artifacts(level(np.eye(8)[:1]), f, 8, 1.6) is None


# -- re-ranking --------------------------------------------------------------

def pyramid(levels):
    g = np.ones(8) / np.sqrt(8)
    return FeaturePyramid(levels, g)


def test_single_candidate_order_unchanged():
    rng = np.random.default_rng(7)
    f = level(rng.normal(size=(30, 8)))
    res = rerank(pyramid([f, f]), [pyramid([f, f])], MSGVConfig(lambdas=(16, 8)))
    assert res.order == [0] and 0 <= res.betas[0] <= 1


def test_identical_beats_scrambled():
    rng = np.random.default_rng(43)
    levels = [level(rng.normal(size=(n, 16)), seed=n) for n in (120, 60)]
    scrambled = [FeatureLevel(l.keys, l.centroids[rng.permutation(len(l))], l.descriptors) for l in levels]
    res = rerank(pyramid(levels), [pyramid(scrambled), pyramid(levels)], MSGVConfig(lambdas=(64, 32)))
    assert res.order == [1, 0]
    assert sorted(res.order) == [0, 1]


def test_too_few_correspondences_score_zero():
    rng = np.random.default_rng(8)
    f = level(rng.normal(size=(30, 8)))
    lone = level(rng.normal(size=(1, 8)))
    res = rerank(pyramid([lone, lone]), [pyramid([f, f])], MSGVConfig(lambdas=(16, 8)))
    assert res.betas == [0.0]
    with pytest.raises(ValueError):
        rerank(pyramid([f, f]), [], MSGVConfig(lambdas=(16, 8)))


def test_ties_keep_retrieval_order():
    rng = np.random.default_rng(9)
    f = level(rng.normal(size=(30, 8)))
    res = rerank(pyramid([f, f]), [pyramid([f, f])] * 3, MSGVConfig(lambdas=(16, 8)))
    assert res.order == [0, 1, 2]
