import numpy as np
import pytest

from _support import (COARSE, FINE, coarse_fine_hierarchy, finite_difference, gradient_matches,
                      random_labels, random_model, random_sentence, random_soft_targets)
from tagunify.features import LatticeGrad
from tagunify.lattice import Lattice, node_marginals, posterior
from tagunify.objectives import (DistillConfig, Instance, PartialAnnotation, SoftTargets,
                                 combined_loss, crf_distill_loss, lattice_crf_distill,
                                 lattice_crf_distill_clamped, lattice_marginal_nll, lattice_nll,
                                 local_distill_loss, marginal_nll_loss, nll_loss)


@pytest.fixture
def hier():
    return coarse_fine_hierarchy()


def test_nll_gradient_finite_difference(rng, hier):
    s = random_sentence(rng)
    m = random_model(rng, hier.unified, [s])
    y = rng.integers(0, m.n_labels, len(s))
    _, g = nll_loss(m, s, y)
    fd = finite_difference(m, lambda mm: nll_loss(mm, s, y)[0])
    ok, err = gradient_matches(g.flat(m.n_features), fd)
    assert ok, err


def test_nll_matches_path_probability(rng):
    lat = Lattice.random(3, 3, rng)
    y = [2, 0, 1]
    loss, _ = lattice_nll(lat, y)
    from tagunify.lattice import brute_force_log_partition, path_score
    assert loss == pytest.approx(brute_force_log_partition(lat) - path_score(lat, y), rel=1e-12)
    assert loss > 0


@pytest.mark.parametrize("tagset", [COARSE, FINE])
def test_marginal_nll_gradient_finite_difference(rng, hier, tagset):
    s = random_sentence(rng)
    m = random_model(rng, hier.unified, [s])
    ann = PartialAnnotation(s, random_labels(rng, tagset, len(s)), hier.projection_for(tagset))
    _, g = marginal_nll_loss(m, ann)
    fd = finite_difference(m, lambda mm: marginal_nll_loss(mm, ann)[0])
    ok, err = gradient_matches(g.flat(m.n_features), fd)
    assert ok, err


def test_marginal_nll_reduces_to_nll_when_fully_observed(rng, hier):
    s = random_sentence(rng)
    m = random_model(rng, hier.unified, [s])
    labels = random_labels(rng, hier.unified, len(s))
    ann = PartialAnnotation(s, labels, hier.identity_projection())
    l1, g1 = marginal_nll_loss(m, ann)
    l2, g2 = nll_loss(m, s, hier.unified.encode(labels))
    assert l1 == l2
    assert np.array_equal(g1.flat(m.n_features), g2.flat(m.n_features))


def test_marginal_nll_nonnegative_and_zero_when_unconstrained(rng):
    lat = Lattice.random(4, 3, rng)
    loss, g = lattice_marginal_nll(lat, np.ones((4, 3), bool))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(g.flat()).max() < 1e-12
    mask = rng.random((4, 3)) < 0.5
    mask[:, 0] = True
    assert lattice_marginal_nll(lat, mask)[0] >= 0


@pytest.mark.parametrize("tau", [1.0, 2.0, 0.5])
def test_crf_distill_gradient_finite_difference(rng, hier, tau):
    s = random_sentence(rng)
    m = random_model(rng, hier.unified, [s])
    targets = [SoftTargets(ts.id, random_soft_targets(rng, len(s), ts.n_labels)) for ts in (COARSE, FINE)]
    projs = [hier.projection_for(ts) for ts in (COARSE, FINE)]
    cfg = DistillConfig(tau=tau)
    _, g = crf_distill_loss(m, s, targets, projs, cfg)
    fd = finite_difference(m, lambda mm: crf_distill_loss(mm, s, targets, projs, cfg)[0])
    ok, err = gradient_matches(g.flat(m.n_features), fd)
    assert ok, err


def test_tangent_gradient_equals_clamped_reference(rng, hier):
    lat = Lattice.random(5, hier.unified.n_labels, rng)
    proj = hier.projection_for(FINE)
    q = random_soft_targets(rng, 5, FINE.n_labels)
    l1, g1 = lattice_crf_distill(lat, [(q, proj.membership)], tau=1.5)
    l2, g2 = lattice_crf_distill_clamped(lat, q, proj.membership, tau=1.5, skip=0.0)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1.flat(), g2.flat(), atol=1e-12)


def test_multi_teacher_gradient_is_sum(rng, hier):
    lat = Lattice.random(4, hier.unified.n_labels, rng)
    pairs = [(random_soft_targets(rng, 4, ts.n_labels), hier.projection_for(ts).membership)
             for ts in (COARSE, FINE)]
    l, g = lattice_crf_distill(lat, pairs)
    parts = [lattice_crf_distill(lat, [p]) for p in pairs]
    assert l == pytest.approx(sum(p[0] for p in parts), rel=1e-12)
    np.testing.assert_allclose(g.flat(), (parts[0][1] + parts[1][1]).flat(), atol=1e-12)


def test_self_distillation_is_a_fixed_point(rng, hier):
    s = random_sentence(rng, 6)
    m = random_model(rng, hier.unified, [s], scale=1.0)
    q = posterior(m.lattice(m.featurize(s)), with_pairs=False).node
    loss, g = crf_distill_loss(m, s, SoftTargets("self", q), hier.identity_projection())
    assert g.max_abs() <= 1e-9
    entropy = -(q * np.log(q)).sum()
    assert loss == pytest.approx(entropy, rel=1e-10)


def test_cross_entropy_bounded_by_entropy(rng):
    # Gibbs: sum_t H(q_t, P_t) >= sum_t H(q_t) with identity groups.
    for _ in range(20):
        lat = Lattice.random(4, 3, rng, scale=2.0)
        q = random_soft_targets(rng, 4, 3)
        loss, _ = lattice_crf_distill(lat, [(q, np.eye(3))])
        assert loss >= -(q * np.log(q)).sum() - 1e-12


def test_temperature_rescales_scores(rng):
    lat = Lattice.random(4, 3, rng)
    q = random_soft_targets(rng, 4, 3)
    l_tau, g_tau = lattice_crf_distill(lat, [(q, np.eye(3))], tau=3.0)
    l_one, g_one = lattice_crf_distill(lat.scaled(1 / 3.0), [(q, np.eye(3))], tau=1.0)
    assert l_tau == pytest.approx(l_one, rel=1e-12)
    np.testing.assert_allclose(g_tau.flat(), g_one.flat() / 3.0, atol=1e-14)


def test_zero_transition_crf_matches_local(rng, hier):
    L = hier.unified.n_labels
    emission = rng.normal(size=(5, L))
    lat = Lattice(emission, np.zeros((L, L)), np.zeros(L), np.zeros(L))
    proj = hier.projection_for(COARSE)
    q = random_soft_targets(rng, 5, COARSE.n_labels)
    l_crf, g_crf = lattice_crf_distill(lat, [(q, proj.membership)], tau=2.0)
    l_loc, g_loc = local_distill_loss(emission, q, proj, tau=2.0)
    assert l_crf == pytest.approx(l_loc, rel=1e-12)
    np.testing.assert_allclose(g_crf.emission, g_loc, atol=1e-12)


def test_local_distill_gradient_finite_difference(rng, hier):
    proj = hier.projection_for(FINE)
    logits = rng.normal(size=(4, hier.unified.n_labels))
    q = random_soft_targets(rng, 4, FINE.n_labels)
    _, g = local_distill_loss(logits, q, proj, tau=1.7)
    fd = np.zeros_like(logits)
    eps = 1e-6
    for idx in np.ndindex(*logits.shape):
        d = np.zeros_like(logits)
        d[idx] = eps
        fd[idx] = (local_distill_loss(logits + d, q, proj, 1.7)[0]
                   - local_distill_loss(logits - d, q, proj, 1.7)[0]) / (2 * eps)
    ok, err = gradient_matches(g, fd)
    assert ok, err


def test_local_model_keeps_transitions_frozen(rng, hier):
    s = random_sentence(rng)
    m = random_model(rng, hier.unified, [s], kind="local")
    targets = SoftTargets("fine", random_soft_targets(rng, len(s), FINE.n_labels))
    _, g = crf_distill_loss(m, s, targets, hier.projection_for(FINE))
    assert not g.transition.any() and not g.start.any() and not g.stop.any()
    fd = finite_difference(m, lambda mm: crf_distill_loss(mm, s, targets, hier.projection_for(FINE))[0],
                           params="weights")
    ok, err = gradient_matches(g.dense_emission(m.n_features).ravel(), fd)
    assert ok, err


def test_combined_loss_interpolates(rng):
    L = 3
    mk = lambda c: LatticeGrad(np.full((2, L), c), np.full((L, L), c), np.full(L, c), np.full(L, c))
    from tagunify.features import SentenceFeatures, scatter
    feats = SentenceFeatures.from_pairs(2, np.array([0, 1]), np.array([0, 1]))
    gd, gs = scatter(feats, mk(1.0)), scatter(feats, mk(10.0))
    loss, g = combined_loss([(2.0, gd)], (5.0, gs), alpha=0.25)
    assert loss == pytest.approx(0.25 * 5.0 + 0.75 * 2.0)
    np.testing.assert_allclose(g.transition, 0.25 * 10 + 0.75 * 1)
    assert combined_loss([(2.0, gd)], None, alpha=0.25)[0] == 2.0
    assert combined_loss([(2.0, gd)], (5.0, gs), alpha=1.0)[0] == 5.0
    assert combined_loss([(2.0, gd)], (5.0, gs), alpha=0.0)[0] == 2.0
    with pytest.raises(ValueError):
        combined_loss([], None, alpha=0.5)
    with pytest.raises(ValueError):
        combined_loss([(2.0, gd)], None, alpha=1.5)


def test_instance_combines_student_and_teachers(rng, hier):
    s = random_sentence(rng)
    m = random_model(rng, hier.unified, [s])
    proj = hier.projection_for(COARSE)
    q = random_soft_targets(rng, len(s), COARSE.n_labels)
    allowed = proj.constraint(random_labels(rng, COARSE, len(s)))
    feats = m.featurize(s)
    inst = Instance(feats, allowed=allowed, targets=[(q, proj.membership)], alpha=0.3, tau=1.0)
    loss, g = inst.loss_and_grad(m)
    ls, _ = lattice_marginal_nll(m.lattice(feats), allowed)
    ld, _ = lattice_crf_distill(m.lattice(feats), [(q, proj.membership)])
    assert loss == pytest.approx(0.3 * ls + 0.7 * ld, rel=1e-12)
    with pytest.raises(ValueError):
        Instance(feats).loss_and_grad(m)


def test_validation_errors(hier):
    with pytest.raises(ValueError):
        DistillConfig(tau=0.0)
    with pytest.raises(ValueError):
        DistillConfig(alpha=1.2)
    with pytest.raises(ValueError):
        SoftTargets("t", np.array([[0.5, 0.4]]))
    with pytest.raises(ValueError):
        PartialAnnotation(("a", "b"), ("O",), hier.identity_projection())
    with pytest.raises(ValueError):
        local_distill_loss(np.zeros((2, 3)), np.full((2, 2), 0.5), np.eye(3))
