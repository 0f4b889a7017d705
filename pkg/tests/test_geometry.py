import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from inklpose import geometry as G
from inklpose.errors import ArgumentError
from inklpose.substrate import functional as F
from inklpose.substrate.gradcheck import grad_check
from inklpose.substrate.tensor import Tensor, precision

import oracles

seeds = st.integers(0, 2**31 - 1)


def min_pairwise(p):
    return min(np.linalg.norm(p[i] - p[j]) for i, j in itertools.combinations(range(len(p)), 2))


# -- FPS ----------------------------------------------------------------------------

def test_fps_full_cover_and_collinear():
    p = np.random.default_rng(0).normal(size=(9, 3))
    assert sorted(G.farthest_point_sampling(p, 9)) == list(range(9))
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]])
    assert set(G.farthest_point_sampling(line, 2, seed=0)) == {0, 3}


@given(seed=seeds, N=st.integers(2, 64))
def test_fps_matches_greedy_oracle(seed, N):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(N, 3))
    n = int(rng.integers(1, N + 1))
    start = int(rng.integers(N))
    assert list(G.farthest_point_sampling(p, n, seed=start)) == oracles.fps(p, n, start)


def test_fps_beats_random_subsets():
    rng = np.random.default_rng(5)
    for _ in range(50):
        N = int(rng.integers(8, 65))
        p = rng.normal(size=(N, 3))
        n = int(rng.integers(2, 7))
        idx = G.farthest_point_sampling(p, n)
        assert len(set(idx)) == n
        rand = rng.choice(N, size=n, replace=False)
        # greedy FPS is only guaranteed within a factor 2 of the best dispersion;
        # a random subset does occasionally beat it (once in these 50 clouds)
        assert 2 * min_pairwise(p[idx]) >= min_pairwise(p[rand])


def test_fps_rejects_bad_count():
    with pytest.raises(ArgumentError):
        G.farthest_point_sampling(np.zeros((3, 3)), 4)


# -- kNN ----------------------------------------------------------------------------

def test_knn_examples():
    b = np.random.default_rng(1).normal(size=(10, 3))
    assert np.array_equal(G.knn(b, b, 1)[:, 0], np.arange(10))
    line = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0], [7, 0, 0]])
    assert sorted(G.knn(np.array([[2.0, 0, 0]]), line, 2)[0]) == [1, 2]


def test_knn_matches_brute_force_on_100_instances():
    rng = np.random.default_rng(2)
    for _ in range(100):
        N, Q = int(rng.integers(1, 65)), int(rng.integers(1, 20))
        b = rng.normal(size=(N, 3))
        q = rng.normal(size=(Q, 3))
        k = int(rng.integers(1, N + 1))
        assert np.array_equal(G.knn(q, b, k), oracles.knn(q, b, k))


def test_knn_ties_break_by_index():
    b = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [5.0, 0, 0]])
    assert list(G.knn(np.zeros((1, 3)), b, 3)[0]) == [0, 1, 2]


def test_batched_knn_matches_per_batch():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(2, 5, 3))
    b = rng.normal(size=(2, 30, 3))
    out = G.batched_knn(q, b, 4)
    for i in range(2):
        assert np.array_equal(out[i], oracles.knn(q[i], b[i], 4))


# -- chamfer --------------------------------------------------------------------------

def test_chamfer_examples():
    p = np.random.default_rng(4).normal(size=(6, 3))
    assert G.chamfer(p, p) == 0.0
    assert G.chamfer([[0.0, 0, 0]], [[1.0, 0, 0]]) == pytest.approx(2.0)
    assert G.chamfer([[0.0, 0, 0], [2.0, 0, 0]], [[1.0, 0, 0]]) == pytest.approx(2.0)


@given(seed=seeds, A=st.integers(1, 64), B=st.integers(1, 64))
def test_chamfer_matches_oracle_and_is_symmetric(seed, A, B):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(A, 3)), rng.normal(size=(B, 3))
    ref = oracles.chamfer(a, b)
    assert G.chamfer(a, b) == pytest.approx(ref, rel=1e-12, abs=1e-12)
    assert G.chamfer(b, a) == pytest.approx(ref, rel=1e-12, abs=1e-12)
    assert G.chamfer(a, b) >= 0


def test_chamfer_tensor_path_and_gradient():
    rng = np.random.default_rng(6)
    with precision(np.float64):
        a = Tensor(rng.normal(size=(2, 7, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        val = G.chamfer(a, b).data
        assert np.allclose(val, [oracles.chamfer(a.data[i], b.data[i]) for i in range(2)])
        rep = grad_check(lambda: F.sum(G.chamfer(a, b)), [a, b], h=1e-6, tol=1e-5)
    assert rep.passed, rep.errors


def test_one_sided_chamfer():
    a = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    b = np.array([[1.0, 0, 0], [10.0, 0, 0]])
    assert float(G.one_sided_chamfer(a, b).data) == pytest.approx((1 + 4) / 2)


# -- transforms ----------------------------------------------------------------------

def random_sim(rng):
    return G.SimTransform(G.uniform_rotation(rng), rng.normal(size=3), rng.uniform(0.1, 2.0, size=3))


def test_to_nocs_examples():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 3))
    s = np.array([1.0, 0, 0])
    assert np.allclose(G.to_nocs(x, G.SimTransform(np.eye(3), np.zeros(3), s)), x)
    tf = random_sim(rng)
    assert np.allclose(G.to_nocs(tf.t[None], tf), 0.0)


@given(seed=seeds)
def test_to_nocs_round_trip(seed):
    rng = np.random.default_rng(seed)
    tf = random_sim(rng)
    x = rng.normal(size=(8, 3))
    y = G.to_nocs(x, tf)
    assert np.abs(y @ tf.R.T * tf.scale + tf.t - x).max() < 1e-9
    assert np.abs(tf.from_nocs(y) - x).max() < 1e-9


def test_umeyama_identity():
    src = np.random.default_rng(8).normal(size=(10, 3))
    R, t, c = G.umeyama_fit(src, src)
    assert np.allclose(R, np.eye(3)) and np.allclose(t, 0) and c == pytest.approx(1.0)


@given(seed=seeds)
def test_umeyama_recovers_synthesized_transform(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(10, 3))
    R0, t0, c0 = G.uniform_rotation(rng), rng.normal(size=3), float(rng.uniform(0.1, 5))
    R, t, c = G.umeyama_fit(src, c0 * src @ R0.T + t0)
    assert np.abs(R - R0).max() < 1e-9 and np.abs(t - t0).max() < 1e-9 and abs(c - c0) < 1e-9


def test_umeyama_planar_mirror_keeps_proper_rotation():
    rng = np.random.default_rng(9)
    src = np.c_[rng.normal(size=(12, 2)), np.zeros(12)]
    dst = src * np.array([1.0, 1.0, -1.0])
    dst[:, :2] = dst[:, :2] @ np.array([[0.0, -1.0], [1.0, 0.0]])
    R, _, _ = G.umeyama_fit(src, dst)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_umeyama_rejects_degenerate():
    with pytest.raises(ArgumentError):
        G.umeyama_fit(np.ones((5, 3)), np.ones((5, 3)))


def test_random_rotation_properties():
    rng = np.random.default_rng(10)
    assert np.allclose(G.random_rotation(0.0, rng), np.eye(3))
    worst = 0.0
    for _ in range(10_000):
        R = G.random_rotation(20.0, rng)
        worst = max(worst, G.geodesic_deg(R, np.eye(3)))
    assert worst <= 20.0 + 1e-6
    for _ in range(100):
        R = G.uniform_rotation(rng)
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9 and np.linalg.det(R) == pytest.approx(1.0)
