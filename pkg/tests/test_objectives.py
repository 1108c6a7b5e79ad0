import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssml.backbones import ModelSpec, build, forward
from ssml.ndgrad import GradTape, ShapeError, backward
from ssml.objectives import (ClassCenters, center_loss, cross_entropy, evaluate, feature_distance,
                             feature_distances, joint_loss, joint_loss_node, update_centers)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([[1.0, 0.0]]), [0]) == 0.0
    assert cross_entropy(np.array([[0.5, 0.5]]), [1]) == pytest.approx(math.log(2), abs=1e-5)
    assert cross_entropy(np.array([[0.0, 1.0]]), [0]) == pytest.approx(-math.log(1e-12), abs=1e-3)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(np.array([[0.5, 0.5]]), [2])


def test_cross_entropy_sum_reduction():
    p = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert cross_entropy(p, [0, 1], "sum") == pytest.approx(2 * cross_entropy(p, [0, 1]))


def _centers(rows, lam=0.001):
    return ClassCenters(np.array(rows, dtype=np.float64), lam=lam)


def test_center_loss_examples():
    assert center_loss(np.array([[3.0, 4.0]]), [0], _centers([[0, 0]])) == 12.5
    assert center_loss(np.array([[1.0, 2.0]]), [0], _centers([[1, 2]])) == 0.0
    assert center_loss(np.array([[1.0, 0.0], [0.0, 2.0]]), [0, 1], _centers([[0, 0], [0, 0]])) == 2.5


def test_center_loss_width_mismatch():
    with pytest.raises(ShapeError):
        center_loss(np.zeros((1, 3)), [0], _centers([[0, 0]]))


def test_joint_loss_arithmetic():
    p, h = np.array([[math.exp(-0.5), 1 - math.exp(-0.5)]]), np.array([[3.0, 4.0]])
    assert joint_loss(p, h, [0], _centers([[0, 0], [0, 0]])) == pytest.approx(0.5125, abs=1e-9)
    assert joint_loss(p, h, [0], _centers([[0, 0], [0, 0]], lam=0.0)) == cross_entropy(p, [0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.1), st.floats(0.0, 0.1))
def test_joint_loss_monotone_in_lambda(seed, lam_a, lam_b):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet([1, 1], size=4)
    h, y = rng.normal(size=(4, 3)), rng.integers(0, 2, 4)
    c = rng.normal(size=(2, 3))
    lo, hi = sorted((lam_a, lam_b))
    assert joint_loss(p, h, y, ClassCenters(c, lam=lo)) <= joint_loss(p, h, y, ClassCenters(c, lam=hi))


@pytest.mark.parametrize("seed", range(5))
def test_joint_loss_feature_gradient(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet([2, 2, 2], size=4)
    h, y = rng.normal(size=(4, 5)), rng.integers(0, 3, 4)
    centers = ClassCenters(rng.normal(size=(3, 5)), lam=0.3)
    tape = GradTape()
    pn, hn = tape.param(p, "p"), tape.param(h, "h")
    grads = backward(tape, joint_loss_node(tape, pn, hn, y, centers))
    numeric = np.zeros_like(h)
    for i in range(h.size):
        e = np.zeros_like(h)
        e.flat[i] = 1e-3
        numeric.flat[i] = (joint_loss(p, h + e, y, centers) - joint_loss(p, h - e, y, centers)) / 2e-3
    np.testing.assert_allclose(grads["h"], numeric, atol=1e-4)
    np.testing.assert_allclose(grads["h"], 0.3 * (h - centers.centers[y]), atol=1e-12)


def test_update_centers_by_hand():
    c = update_centers(ClassCenters(np.zeros((2, 2))), np.array([[2.0, 0.0], [4.0, 0.0]]), [0, 0])
    np.testing.assert_allclose(c.centers[0], [0.002, 0.0], atol=1e-15)
    np.testing.assert_array_equal(c.centers[1], [0.0, 0.0])


def test_update_centers_sample_at_center():
    start = ClassCenters(np.array([[1.0, -1.0], [3.0, 3.0]]))
    c = update_centers(start, np.array([[1.0, -1.0]]), [0])
    np.testing.assert_array_equal(c.centers, start.centers)


def eq5_oracle(centers, feats, labels, lr):
    """Literal per-class summation of the center update."""
    out = []
    for j, c in enumerate(centers):
        num = np.zeros_like(c)
        count = 0
        for h, y in zip(feats, labels):
            if y == j:
                num = num + (c - h)
                count += 1
        out.append(c - lr * num / (1 + count))
    return np.array(out)


@pytest.mark.parametrize("seed", range(100))
def test_update_centers_matches_literal_sum(seed):
    rng = np.random.default_rng(seed)
    K, n, m = int(rng.integers(2, 5)), int(rng.integers(1, 8)), int(rng.integers(1, 20))
    c0 = rng.normal(size=(K, n))
    feats, labels = rng.normal(size=(m, n)), rng.integers(0, K, m)
    got = update_centers(ClassCenters(c0, lr_center=0.01), feats, labels).centers
    np.testing.assert_allclose(got, eq5_oracle(c0, feats, labels, 0.01), rtol=0, atol=1e-7)


def test_feature_distance_examples():
    assert feature_distance(np.array([1.0, 1.0]), np.zeros(2)) == 0.5
    assert feature_distance(np.array([0.3, 0.2]), np.array([0.3, 0.2])) == 0.0
    assert feature_distance(np.array([2.0, 0, 0, 0]), np.zeros(4)) == 0.5
    with pytest.raises(ShapeError):
        feature_distance(np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10))
def test_distance_is_normalised_center_loss(seed, n):
    rng = np.random.default_rng(seed)
    h, c = rng.normal(size=n), rng.normal(size=n)
    cl = center_loss(h[None], [0], ClassCenters(c[None]))
    assert feature_distance(h, c) == pytest.approx(cl / n, rel=1e-12)
    assert cl >= 0
    np.testing.assert_allclose(feature_distances(h[None], c[None], np.array([0]))[0], feature_distance(h, c))


def test_evaluate_gradients_flow_to_every_block():
    params = build(ModelSpec(kind="STNN"), 0)
    x = np.random.default_rng(0).normal(size=(4, 32, 128))
    ev = evaluate(params, x, np.array([0, 1, 0, 1]), ClassCenters.zeros(2, 1024))
    assert set(ev.grads) == set(params.tensors)
    assert all(np.all(np.isfinite(g)) and g.shape == params.tensors[k].shape for k, g in ev.grads.items())
    res = forward(params, x)
    assert ev.loss == pytest.approx(joint_loss(res.probs, res.features, [0, 1, 0, 1], ClassCenters.zeros(2, 1024)),
                                    rel=1e-5)
