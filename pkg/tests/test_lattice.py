import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagunify.lattice import (NEG, Lattice, bio_masks, brute_force_constrained_log_partition,
                              brute_force_expectation, brute_force_log_partition,
                              brute_force_marginals, brute_force_viterbi, clamped_node_marginals,
                              constrained_log_partition, log_partition, marginal_tangents,
                              node_marginals, pairwise_marginals, path_score, posterior, viterbi)


def random_mask(rng, T, L):
    mask = rng.random((T, L)) < 0.6
    mask[np.arange(T), rng.integers(0, L, T)] = True
    return mask


lattices = st.tuples(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))


@settings(max_examples=80, deadline=None)
@given(lattices)
def test_partition_and_marginals_match_enumeration(spec):
    T, L, seed = spec
    rng = np.random.default_rng(seed)
    lat = Lattice.random(T, L, rng, scale=2.0)
    assert log_partition(lat) == pytest.approx(brute_force_log_partition(lat), rel=1e-10)
    node, pair = brute_force_marginals(lat)
    np.testing.assert_allclose(node_marginals(lat), node, rtol=1e-10, atol=1e-13)
    if T > 1:
        np.testing.assert_allclose(pairwise_marginals(lat), pair, rtol=1e-10, atol=1e-13)
    mask = random_mask(rng, T, L)
    assert constrained_log_partition(lat, mask) == pytest.approx(
        brute_force_constrained_log_partition(lat, mask), rel=1e-10)
    y, score = viterbi(lat)
    y_bf, score_bf = brute_force_viterbi(lat)
    assert list(y) == list(y_bf)
    assert score == pytest.approx(score_bf, rel=1e-10)


def test_marginal_invariants(rng):
    lat = Lattice.random(7, 5, rng, scale=3.0)
    post = posterior(lat)
    np.testing.assert_allclose(post.node.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(post.pair.sum(axis=(1, 2)), 1.0, atol=1e-12)
    # Pairwise marginals sum to the adjacent node marginals.
    np.testing.assert_allclose(post.pair.sum(axis=2), post.node[:-1], atol=1e-12)
    np.testing.assert_allclose(post.pair.sum(axis=1), post.node[1:], atol=1e-12)
    assert np.all(post.node >= 0) and np.all(post.pair >= 0)


def test_partition_is_shift_invariant_per_position(rng):
    lat = Lattice.random(5, 3, rng)
    shifted = Lattice(lat.emission + np.arange(5)[:, None], lat.transition, lat.start, lat.stop)
    assert log_partition(shifted) == pytest.approx(log_partition(lat) + 10.0, rel=1e-12)
    np.testing.assert_allclose(node_marginals(shifted), node_marginals(lat), atol=1e-12)


def test_single_label_and_single_token():
    lat = Lattice.zeros(4, 1)
    assert log_partition(lat) == pytest.approx(0.0)
    lat = Lattice(np.array([[0.0, np.log(3.0)]]), np.zeros((2, 2)), np.zeros(2), np.zeros(2))
    assert log_partition(lat) == pytest.approx(np.log(4.0))
    np.testing.assert_allclose(node_marginals(lat), [[0.25, 0.75]])
    assert list(viterbi(lat)[0]) == [1]


def test_uniform_lattice_counts_paths():
    assert log_partition(Lattice.zeros(5, 3)) == pytest.approx(5 * np.log(3))


def test_viterbi_ties_prefer_smallest_index():
    y, _ = viterbi(Lattice.zeros(4, 3))
    assert list(y) == [0, 0, 0, 0]


def test_viterbi_path_score_consistent(rng):
    lat = Lattice.random(6, 4, rng)
    y, score = viterbi(lat)
    assert path_score(lat, y) == pytest.approx(score, rel=1e-12)


def test_constraint_restricts_mass(rng):
    lat = Lattice.random(5, 3, rng)
    mask = np.ones((5, 3), bool)
    mask[2] = [False, True, False]
    node = node_marginals(lat.constrain(mask))
    np.testing.assert_allclose(node[2], [0, 1, 0], atol=1e-12)
    assert constrained_log_partition(lat, mask) < log_partition(lat)
    # All-allowed constraint is the free partition.
    assert constrained_log_partition(lat, np.ones((5, 3), bool)) == pytest.approx(log_partition(lat))


def test_clamped_marginals_match_enumeration(rng):
    lat = Lattice.random(4, 3, rng)
    mask = np.ones((4, 3), bool)
    mask[1] = [False, True, True]
    node, _ = brute_force_marginals(lat, mask)
    np.testing.assert_allclose(clamped_node_marginals(lat, 1, [1, 2]), node, atol=1e-12)


def test_marginal_tangents_match_covariance(rng):
    lat = Lattice.random(4, 3, rng)
    d = rng.normal(size=(4, 3))
    d_logz, d_node, d_pair = marginal_tangents(lat, d)
    node, _ = brute_force_marginals(lat)
    assert d_logz == pytest.approx(float((node * d).sum()), rel=1e-10)
    # d E[phi] / d eps along d equals Cov(phi, sum_t d_t(y_t)).
    eps = 1e-6
    plus = Lattice(lat.emission + eps * d, lat.transition, lat.start, lat.stop)
    minus = Lattice(lat.emission - eps * d, lat.transition, lat.start, lat.stop)
    fd = (node_marginals(plus) - node_marginals(minus)) / (2 * eps)
    np.testing.assert_allclose(d_node, fd, atol=1e-8)
    fd_pair = (pairwise_marginals(plus) - pairwise_marginals(minus)) / (2 * eps)
    np.testing.assert_allclose(d_pair, fd_pair, atol=1e-8)


def test_expectation_oracle_agrees(rng):
    lat = Lattice.random(3, 3, rng)
    node = brute_force_expectation(lat, lambda y: np.eye(3)[y])
    np.testing.assert_allclose(node, node_marginals(lat), atol=1e-12)


def test_bio_masks():
    labels = ["O", "B-X", "I-X", "B-Y", "I-Y"]
    trans, start = bio_masks(labels)
    assert not start[2] and not start[4] and start[0] and start[1]
    assert trans[1, 2] and trans[2, 2] and not trans[0, 2] and not trans[3, 2] and not trans[4, 2]
    assert trans[3, 4] and not trans[1, 4]
    lat = Lattice.random(5, 5, np.random.default_rng(0)).with_transition_mask(trans, start)
    y, _ = viterbi(lat)
    prev = 0
    for j in y:
        if labels[j].startswith("I-"):
            assert labels[prev][2:] == labels[j][2:] and prev != 0
        prev = j


def test_hard_constraints_use_finite_sentinel(rng):
    lat = Lattice.random(3, 3, rng)
    mask = np.zeros((3, 3), bool)
    mask[:, 0] = True
    c = lat.constrain(mask)
    assert np.all(np.isfinite(c.emission))
    assert c.emission.min() <= NEG / 2


def test_oracle_refuses_huge_lattice():
    with pytest.raises(ValueError):
        brute_force_log_partition(Lattice.zeros(30, 5))
