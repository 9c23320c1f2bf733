import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from feel import cci
from feel.clustering import euclidean_confidence_matrix, kmeans, rank_rows


def line_universe(xs, K=0, video_only=False):
    pts = np.asarray(xs, dtype=float)[:, None]
    return cci.build_universe(pts[:K], pts[K:], video_only)


def test_universe_invariants():
    rng = np.random.default_rng(0)
    U = cci.build_universe(rng.standard_normal((3, 4)), rng.standard_normal((20, 4)))
    assert np.all(np.diag(U.dist) == 0)
    assert np.abs(U.dist - U.dist.T).max() < 1e-9
    for i in range(U.size):
        assert i not in U.order[i]
        assert sorted(U.order[i]) == sorted(set(range(U.size)) - {i})


def test_top_l_neighbors():
    U = line_universe([0.0, 1.0, 3.0, 7.0])
    assert U.order[0][:1].tolist() == [1]
    assert cci.top_l_neighbors(U, 2, 2).tolist() == [1, 0]
    eq = cci.build_universe(np.empty((0, 2)), np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1.]]))
    assert cci.top_l_neighbors(eq, 0, 3).tolist() == [1, 2, 3]
    with pytest.raises(ValueError):
        cci.top_l_neighbors(U, 0, 0)
    with pytest.raises(ValueError):
        cci.top_l_neighbors(U, 0, 4)


def test_reciprocal_examples():
    U = line_universe([0.0, 1.0, 10.0, 10.5, 11.2])
    assert set(cci.k_reciprocal_set(U, 0, 1).tolist()) == {1}
    assert set(cci.k_reciprocal_set(U, 1, 1).tolist()) == {0}
    # 2's nearest is 3, but 3 prefers 4: nothing is mutual at l=1
    hub = line_universe([0.0, 1.0, 1.1, 5.0])
    assert cci.k_reciprocal_set(hub, 3, 1).size == 0
    rng = np.random.default_rng(1)
    R = cci.build_universe(rng.standard_normal((2, 3)), rng.standard_normal((15, 3)))
    for e in range(R.size):
        u = set(cci.k_reciprocal_set(R, e, 4).tolist())
        assert u <= set(cci.top_l_neighbors(R, e, 4).tolist())
        assert u <= set(cci.expand_reciprocal_set(R, e, 4).tolist())


def test_expansion_examples():
    U = line_universe([0.0, 0.1, 0.2, 0.3, 50.0, 51.0])
    base = set(cci.k_reciprocal_set(U, 0, 3).tolist())
    assert set(cci.expand_reciprocal_set(U, 0, 3).tolist()) >= base
    # a far cluster never meets the 2/3 overlap rule
    far = line_universe([0.0, 1.0, 100.0, 101.0, 102.0])
    assert set(cci.expand_reciprocal_set(far, 0, 1).tolist()) == set(cci.k_reciprocal_set(far, 0, 1).tolist())


def test_expansion_random_universe_oracle():
    rng = np.random.default_rng(2)
    for video_only in (False, True):
        U = cci.build_universe(rng.standard_normal((3, 2)), rng.standard_normal((27, 2)), video_only)
        for e in range(U.size):
            got = set(cci.expand_reciprocal_set(U, e, 6).tolist())
            assert got == oracles.expanded(U.dist, e, 6, 3, video_only)


def test_video_only_universe_excludes_centers():
    rng = np.random.default_rng(3)
    U = cci.build_universe(rng.standard_normal((4, 3)), rng.standard_normal((30, 3)), video_only=True)
    for e in range(U.size):
        assert np.all(cci.expand_reciprocal_set(U, e, 8) >= 4)
    for c in range(4):
        assert np.all(cci.top_l_neighbors(U, c, 30) >= 4)
    with pytest.raises(ValueError):
        cci.top_l_neighbors(U, 0, 31)


def test_encoding_examples():
    e = cci.encode_neighbors(0, [1, 2], np.array([0.0, 0.0, 2.0, 1.0]))
    np.testing.assert_allclose(e, [1.0, 1.0, np.exp(-2.0), 0.0])
    assert cci.encode_neighbors(0, [2], np.array([0.0, 0.0, 2.0]), include_self=False)[0] == 0.0
    w = cci.encode_neighbors(0, [1, 2, 3], np.array([0.0, 0.5, 1.0, 2.0]))
    assert w[1] > w[2] > w[3] > 0


def test_jaccard_examples():
    assert cci.jaccard_set_form({1, 2}, {1, 2}) == 0.0
    assert cci.jaccard_set_form({1}, {2}) == 1.0
    assert cci.jaccard_set_form({1, 2, 3}, {2, 3, 4}) == 0.5
    assert cci.jaccard_set_form(set(), set()) == 1.0
    e = np.array([0.3, 0.0, 1.0])
    assert cci.jaccard_encoded(e, e) == 0.0
    assert cci.jaccard_encoded(np.zeros(3), np.zeros(3)) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_jaccard_encoded_bounds_and_oracle(a, b):
    n = min(len(a), len(b))
    ea, eb = np.array(a[:n]), np.array(b[:n])
    d = cci.jaccard_encoded(ea, eb)
    assert 0.0 <= d <= 1.0
    assert abs(d - oracles.jaccard_loop(ea, eb)) < 1e-12
    M = cci.jaccard_matrix(ea[None], eb[None])
    assert abs(M[0, 0] - d) < 1e-12


def clustered_case(seed=0, K=4, per=25, noise=1.2):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((K, 6)) * 3
    truth = np.repeat(np.arange(K), per)
    F = centers[truth] + noise * rng.standard_normal((K * per, 6))
    state = kmeans(F, K, np.random.default_rng(seed))
    return F, truth, state


def test_refined_gamma_endpoints():
    F, _, state = clustered_case()
    U = cci.build_universe(state.centers, F)
    r0 = cci.refined_distance_matrix(state.D_E, U, gamma=0.0)
    np.testing.assert_array_equal(r0.distances, state.D_E)
    np.testing.assert_array_equal(r0.rankings, state.rankings)
    r1 = cci.refined_distance_matrix(state.D_E, U, gamma=1.0)
    np.testing.assert_array_equal(r1.distances, r1.jaccard)
    np.testing.assert_array_equal(r1.rankings, rank_rows(r1.jaccard))
    r = cci.refined_distance_matrix(state.D_E, U, gamma=0.7)
    np.testing.assert_allclose(r.distances, 0.7 * r.jaccard + 0.3 * state.D_E, atol=1e-12)
    assert np.all(r.distances >= 0)
    assert all(sorted(row) == list(range(F.shape[0])) for row in r.rankings)
    with pytest.raises(ValueError):
        cci.refined_distance_matrix(state.D_E, U, gamma=1.5)


def test_blend_arithmetic():
    assert 0.7 * 0.5 + 0.3 * 1.0 == pytest.approx(0.65)


def test_normalized_rankings_unchanged_at_gamma_zero():
    F, _, state = clustered_case(1)
    U = cci.build_universe(state.centers, F)
    r = cci.refined_distance_matrix(state.D_E, U, gamma=0.0, normalize=True)
    np.testing.assert_array_equal(r.rankings, state.rankings)


def test_jaccard_matrix_matches_direct_encoding():
    F, _, state = clustered_case(2, K=3, per=10)
    U = cci.build_universe(state.centers, F)
    r = cci.refined_distance_matrix(state.D_E, U, gamma=1.0, l=6, l_expansion=1)
    for k in range(3):
        ek = cci.encode_neighbors(k, cci.expand_reciprocal_set(U, k, 6), U.dist[k])
        for n in (0, 7, 21):
            v = 3 + n
            ev = cci.encode_neighbors(v, cci.expand_reciprocal_set(U, v, 6), U.dist[v])
            assert abs(r.jaccard[k, n] - oracles.jaccard_loop(ek, ev)) < 1e-12


def test_query_expansion_can_be_disabled():
    F, _, state = clustered_case(3, K=3, per=10)
    U = cci.build_universe(state.centers, F)
    a = cci.refined_distance_matrix(state.D_E, U, gamma=1.0, l=6, l_expansion=1)
    b = cci.refined_distance_matrix(state.D_E, U, gamma=1.0, l=6, l_expansion=4)
    assert not np.array_equal(a.jaccard, b.jaccard)


def test_small_universe_clamps_l(caplog):
    F, _, state = clustered_case(4, K=2, per=4)
    U = cci.build_universe(state.centers, F)
    r = cci.refined_distance_matrix(state.D_E, U, l=50, l_expansion=50)
    assert r.distances.shape == (2, 8)
    assert "clamped" in caplog.text


def test_video_only_reranking_improves_precision():
    hits_init = hits_ref = 0
    for seed in range(3):
        F, truth, state = clustered_case(seed, K=4, per=30, noise=2.2)
        U = cci.build_universe(state.centers, F, video_only=True)
        r = cci.refined_distance_matrix(state.D_E, U)
        mapping = [np.bincount(truth[state.assignments == k], minlength=4).argmax() for k in range(4)]
        hits_init += sum((truth[state.rankings[k][:10]] == mapping[k]).sum() for k in range(4))
        hits_ref += sum((truth[r.rankings[k][:10]] == mapping[k]).sum() for k in range(4))
    assert hits_ref >= hits_init
