import math

import numpy as np
import pytest

from data_weighter.errors import ConfigurationError, ContractError
from data_weighter.metaloss import MetaGradient, MetaObjective, meta_grad
from data_weighter.ndmath import RandomStream, beta_quantile, betainc
from data_weighter.net import LossKind, per_example_grads
from data_weighter.weighters import (BetaWeightTable, HyperParams, InnerLoss, PruneConfig,
                                     ScalarWeightTable, SourceBatch, bdw_step, domain_means, dw_step,
                                     fixed_weight_step, hypergrad_weights, l2rw_step, l2rw_weights,
                                     nn_distances, nn_weights, prune_bdw, prune_dw, weighted_step)


@pytest.fixture
def rotation_batch():
    images = RandomStream(21).uniform((4, 4, 4))
    return SourceBatch(np.array([0, 2, 5, 7]), images)


@pytest.fixture
def fixed_meta(small_classifier, episode):
    spec, _ = small_classifier
    return lambda theta: meta_grad(spec, theta, MetaObjective.NCC, episode)


def test_hypergrad_simple_cases():
    m = np.array([1.0, 2.0, -1.0])
    assert hypergrad_weights(np.array([[2.0, -1.0, 0.0]]), m, 1.0, 1)[0] == 0.0
    assert hypergrad_weights(m[None, :], m, 1.0, 1)[0] == pytest.approx(-6.0)
    np.testing.assert_allclose(hypergrad_weights(np.vstack([m, 2 * m]), m, 0.5, 2), [-1.5, -3.0])
    with pytest.raises(ContractError):
        hypergrad_weights(np.ones((2, 4)), m, 1.0, 2)


def test_hypergrad_rejects_mixed_layouts(small_classifier, small_vae):
    _, theta = small_classifier
    _, vtheta = small_vae
    with pytest.raises(ContractError):
        hypergrad_weights([theta, theta], vtheta, 1.0, 2)


def test_hypergrad_matches_finite_differences(small_classifier, rotation_batch, fixed_meta):
    spec, theta = small_classifier
    alpha, k = 0.5, len(rotation_batch)
    G = per_example_grads(spec, theta, rotation_batch.inputs, LossKind.ROTATION)
    w = np.array([0.2, 0.9, 0.5, 0.7])

    def meta_loss(weights):
        return fixed_meta(weighted_step(theta, G, weights, alpha)).loss

    m = fixed_meta(weighted_step(theta, G, w, alpha)).grad
    hg = hypergrad_weights(G, m, alpha, k)
    h = 1e-4
    fd = np.zeros(k)
    for i in range(k):
        up, down = w.copy(), w.copy()
        up[i] += h
        down[i] -= h
        fd[i] = (meta_loss(up) - meta_loss(down)) / (2 * h)
    np.testing.assert_allclose(hg, fd, rtol=1e-4, atol=1e-10)


def test_bdw_pathwise_gradient_with_frozen_noise(small_classifier, rotation_batch, fixed_meta):
    spec, theta = small_classifier
    r = RandomStream(22)
    table = BetaWeightTable(r.uniform(8) * 1.5, r.uniform(8) * 1.5, np.ones(8, dtype=bool))
    before = table.log_a.copy()
    hp = HyperParams(alpha=0.5, eta=0.0, k=4, T=1)
    inner = InnerLoss(spec, LossKind.ROTATION)
    _, table, res = bdw_step(rotation_batch, theta, table, hp, RandomStream(23), inner, fixed_meta)
    assert np.array_equal(table.log_a, before)

    idx = rotation_batch.indices
    a, b = table.a[idx], table.b[idx]
    u = np.asarray(betainc(res.weights, a, b))
    G = per_example_grads(spec, theta, rotation_batch.inputs, LossKind.ROTATION)
    h = 1e-3
    for i in range(len(idx)):
        losses = []
        for sign in (1.0, -1.0):
            a_i = a.copy()
            a_i[i] = math.exp(math.log(a[i]) + sign * h)
            w = res.weights.copy()
            w[i] = beta_quantile(u[i], a_i[i], b[i])
            losses.append(fixed_meta(weighted_step(theta, G, w, hp.alpha)).loss)
        fd = (losses[0] - losses[1]) / (2 * h)
        assert res.grad_log_a[i] == pytest.approx(fd, rel=1e-2, abs=1e-9)


def test_bdw_unit_weights_match_unweighted_sgd(small_classifier, fixed_meta):
    spec, theta = small_classifier
    inner = InnerLoss(spec, LossKind.ROTATION)
    hp = HyperParams(alpha=0.1, eta=0.0, k=3, T=1)
    table = BetaWeightTable.uniform(9)
    images = RandomStream(24).uniform((9, 4, 4))
    theta_a = theta_b = theta
    for start in (0, 3, 6):
        batch = SourceBatch(np.arange(start, start + 3), images[start:start + 3])
        theta_a, table, _ = bdw_step(batch, theta_a, table, hp, RandomStream(start), inner, fixed_meta,
                                     unit_weights=True)
        theta_b = fixed_weight_step(batch, theta_b, np.ones(3), hp, inner).theta
    assert np.array_equal(theta_a.values, theta_b.values)
    assert np.all(table.log_a == 0) and np.all(table.log_b == 0)


def test_bdw_with_zero_eta_takes_weighted_step(small_classifier, rotation_batch, fixed_meta):
    spec, theta = small_classifier
    inner = InnerLoss(spec, LossKind.ROTATION)
    hp = HyperParams(alpha=0.1, eta=0.0, k=4, T=1)
    table = BetaWeightTable.uniform(8)
    theta_next, table, res = bdw_step(rotation_batch, theta, table, hp, RandomStream(25), inner, fixed_meta)
    G = per_example_grads(spec, theta, rotation_batch.inputs, LossKind.ROTATION)
    assert np.array_equal(theta_next.values, weighted_step(theta, G, res.weights, hp.alpha).values)
    assert np.all((res.weights > 0) & (res.weights < 1))
    assert np.all(table.log_a == 0)


def test_bdw_updates_only_batch_rows(small_classifier, rotation_batch, fixed_meta):
    spec, theta = small_classifier
    table = BetaWeightTable.uniform(8)
    hp = HyperParams(alpha=0.5, eta=100.0, k=4, T=1)
    bdw_step(rotation_batch, theta, table, hp, RandomStream(26), InnerLoss(spec, LossKind.ROTATION), fixed_meta)
    untouched = np.setdiff1d(np.arange(8), rotation_batch.indices)
    assert np.all(table.log_a[untouched] == 0) and np.all(table.log_b[untouched] == 0)
    assert np.any(table.log_a[rotation_batch.indices] != 0)


def test_bdw_rejects_pruned_instances(small_classifier, rotation_batch, fixed_meta):
    spec, theta = small_classifier
    table = BetaWeightTable.uniform(8)
    table.active[5] = False
    with pytest.raises(ContractError):
        bdw_step(rotation_batch, theta, table, HyperParams(), RandomStream(0),
                 InnerLoss(spec, LossKind.ROTATION), fixed_meta)


def test_dw_first_step_is_noop_then_weights_move(small_classifier, rotation_batch, fixed_meta):
    spec, theta = small_classifier
    inner = InnerLoss(spec, LossKind.ROTATION)
    hp = HyperParams(alpha=0.5, eta=5.0, k=4, T=1)
    table = ScalarWeightTable.zeros(8)
    theta_next, table, res = dw_step(rotation_batch, theta, table, hp, None, inner, fixed_meta)
    assert np.array_equal(theta_next.values, theta.values)
    G = per_example_grads(spec, theta, rotation_batch.inputs, LossKind.ROTATION)
    hg = hypergrad_weights(G, fixed_meta(theta).grad, hp.alpha, 4)
    np.testing.assert_allclose(table.w[rotation_batch.indices], np.clip(-hp.eta * hg, 0, 1), atol=1e-15)
    assert np.all((table.w >= 0) & (table.w <= 1))


def test_dw_weights_are_clipped():
    table = ScalarWeightTable([1.3, -0.2, 0.4], np.ones(3, dtype=bool))
    np.testing.assert_array_equal(table.w, [1.0, 0.0, 0.4])


def test_dw_large_steps_stay_in_unit_interval(small_classifier, rotation_batch, fixed_meta):
    spec, theta = small_classifier
    table = ScalarWeightTable(np.full(8, 0.5), np.ones(8, dtype=bool))
    hp = HyperParams(alpha=0.5, eta=1e6, k=4, T=1)
    dw_step(rotation_batch, theta, table, hp, None, InnerLoss(spec, LossKind.ROTATION), fixed_meta)
    assert np.all((table.w >= 0) & (table.w <= 1))


def test_l2rw_weights_edge_cases():
    assert np.array_equal(l2rw_weights([0.1, 0.2, 0.3]), [0.0, 0.0, 0.0])
    assert np.array_equal(l2rw_weights([0.1, -0.2, 0.3]), [0.0, 1.0, 0.0])
    np.testing.assert_allclose(l2rw_weights([-1.0, -3.0]), [0.25, 0.75])


def test_l2rw_weights_sum_to_one_or_zero():
    r = RandomStream(27)
    for trial in range(1000):
        hg = r.normal(8) + (2.0 if trial % 10 == 0 else 0.0)
        w = l2rw_weights(hg)
        assert np.all(w >= 0)
        total = w.sum()
        assert total == 0.0 or total == pytest.approx(1.0, abs=1e-12)


def test_l2rw_step_without_signal_keeps_theta(small_classifier, rotation_batch):
    spec, theta = small_classifier
    flat = lambda t: MetaGradient(0.0, t.zeros_like())
    res = l2rw_step(rotation_batch, theta, HyperParams(alpha=0.5), InnerLoss(spec, LossKind.ROTATION), flat)
    assert np.array_equal(res.theta.values, theta.values)
    assert np.all(res.weights == 0)


def test_l2rw_step_uses_normalised_weights(small_classifier, rotation_batch, fixed_meta):
    spec, theta = small_classifier
    hp = HyperParams(alpha=0.5)
    res = l2rw_step(rotation_batch, theta, hp, InnerLoss(spec, LossKind.ROTATION), fixed_meta)
    G = per_example_grads(spec, theta, rotation_batch.inputs, LossKind.ROTATION)
    hg = hypergrad_weights(G, fixed_meta(theta).grad, hp.alpha, 4)
    np.testing.assert_array_equal(res.weights, l2rw_weights(hg))
    expected = theta.values - hp.alpha * (res.weights @ G)
    np.testing.assert_allclose(res.theta.values, expected, rtol=1e-14, atol=1e-16)


def test_l2rw_lookahead_takes_the_meta_gradient_after_a_unit_step(small_classifier, rotation_batch,
                                                                  fixed_meta):
    spec, theta = small_classifier
    hp = HyperParams(alpha=0.5)
    inner = InnerLoss(spec, LossKind.ROTATION)
    seen = []

    def recording_meta(point):
        seen.append(point.values.copy())
        return fixed_meta(point)

    res = l2rw_step(rotation_batch, theta, hp, inner, recording_meta, lookahead=True)
    G = per_example_grads(spec, theta, rotation_batch.inputs, LossKind.ROTATION)
    ahead = weighted_step(theta, G, np.ones(4), hp.alpha)
    np.testing.assert_allclose(seen[0], theta.values - hp.alpha * G.mean(axis=0), rtol=1e-14, atol=1e-16)
    hg = hypergrad_weights(G, fixed_meta(ahead).grad, hp.alpha, 4)
    np.testing.assert_array_equal(res.weights, l2rw_weights(hg))
    default = l2rw_step(rotation_batch, theta, hp, inner, recording_meta)
    assert np.array_equal(seen[1], theta.values)
    np.testing.assert_array_equal(default.weights,
                                  l2rw_weights(hypergrad_weights(G, fixed_meta(theta).grad, hp.alpha, 4)))


def test_nn_weights():
    target = np.array([[0.0, 0.0], [3.0, 4.0]])
    source = np.array([[0.0, 0.0], [3.0, 4.0], [6.0, 8.0], [-1e5, 0.0]])
    w = nn_weights(source, target, 1e-5)
    assert w[0] == 1.0 and w[1] == 1.0
    assert w[3] == pytest.approx(math.exp(-1.0), rel=1e-12)
    assert w[3] == pytest.approx(0.3678794, abs=1e-7)
    d = nn_distances(source, target)
    np.testing.assert_allclose(d, [0.0, 0.0, 5.0, 1e5])


def test_nn_weights_monotone_and_chunked():
    r = RandomStream(28)
    source, target = r.uniform((50, 6)), r.uniform((7, 6))
    d = nn_distances(source, target)
    w = nn_weights(source, target, 2.0)
    order = np.argsort(d)
    assert np.all(np.diff(w[order]) <= 0)
    np.testing.assert_array_equal(nn_distances(source, target, chunk=3), d)


def test_nn_weights_errors():
    with pytest.raises(ConfigurationError):
        nn_weights(np.zeros((2, 3)), np.zeros((0, 3)), 1.0)
    with pytest.raises(ConfigurationError, match="non-empty target"):
        nn_weights(np.zeros((2, 4, 4)), np.zeros((0, 4, 4)), 1.0)
    with pytest.raises(ConfigurationError):
        nn_weights(np.zeros((2, 3)), np.zeros((1, 3)), 0.0)


def table_from(a, b):
    return BetaWeightTable(np.log(a), np.log(b), np.ones(len(a), dtype=bool))


def test_prune_bdw_examples():
    table = table_from([1.0, 1.0], [1.0, 50.0])
    table, count = prune_bdw(table, PruneConfig(lam=0.1, rho=0.5))
    assert count == 1
    assert table.active.tolist() == [True, False]


def test_prune_bdw_keeps_everything_as_rho_approaches_one():
    table = table_from([0.5, 1.0, 2.0, 1.0], [3.0, 20.0, 40.0, 1.0])
    _, count = prune_bdw(table, PruneConfig(lam=0.1, rho=1 - 1e-12))
    assert count == 0


def test_prune_bdw_is_permanent():
    table = table_from([1.0, 1.0], [50.0, 1.0])
    prune_bdw(table, PruneConfig(0.1, 0.5))
    table.log_b[0] = 0.0
    _, count = prune_bdw(table, PruneConfig(0.1, 0.5))
    assert count == 0
    assert not table.active[0]


def test_prune_bdw_equation_rule_is_reversed():
    table = table_from([1.0, 1.0], [1.0, 50.0])
    _, count = prune_bdw(table, PruneConfig(lam=0.1, rho=0.5, rule="equation"))
    assert count == 1
    assert table.active.tolist() == [False, True]


def test_prune_dw_examples():
    table = ScalarWeightTable([0.5, 0.25, 0.0, 0.1], np.ones(4, dtype=bool))
    table, count = prune_dw(table, 0.25)
    assert table.active.tolist() == [True, False, False, False]
    assert count == 3
    zero = ScalarWeightTable([0.0, 1e-9, 0.5], np.ones(3, dtype=bool))
    zero, count = prune_dw(zero, 0.0)
    assert zero.active.tolist() == [False, True, True]


def test_settings_validation():
    with pytest.raises(ConfigurationError):
        PruneConfig(lam=0.0)
    with pytest.raises(ConfigurationError):
        PruneConfig(rho=1.0)
    with pytest.raises(ConfigurationError):
        PruneConfig(rule="other")
    with pytest.raises(ConfigurationError):
        HyperParams(alpha=0.0)
    with pytest.raises(ConfigurationError):
        HyperParams(k=0)
    with pytest.raises(ContractError):
        SourceBatch(np.array([1, 1]), np.zeros((2, 4)))


def test_expected_weight_and_domain_means():
    table = BetaWeightTable(np.log([1.0, 3.0, 1.0]), np.log([1.0, 1.0, 3.0]), np.ones(3, dtype=bool),
                            np.array(["x", "x", "y"], dtype=object))
    np.testing.assert_allclose(table.expected_weight(), [0.5, 0.75, 0.25])
    assert domain_means(table.expected_weight(), table.domain_tags) == pytest.approx({"x": 0.625, "y": 0.25})
    assert domain_means(np.ones(3), None) == {}
    masked = domain_means(table.expected_weight(), table.domain_tags, np.array([True, True, False]))
    assert masked == {"x": pytest.approx(0.625), "y": None}
