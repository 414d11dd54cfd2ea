"""Self-checks of the loop references against hand-computed values."""

import math

import numpy as np
import pytest

from salseg import oracles


def test_attention_hand_computed():
    q = np.array([[1.0, 0.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[2.0], [4.0]])
    out, p = oracles.naive_attention(q, k, v, scale=1.0)
    e = math.e
    np.testing.assert_allclose(p, [[e / (e + 1), 1 / (e + 1)]])
    np.testing.assert_allclose(out, [[2 * e / (e + 1) + 4 / (e + 1)]])


def test_attention_masked_keys_get_zero_weight():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
    _, p = oracles.naive_attention(q, k, v, visible=[True, False, True, False, False])
    assert np.all(p[:, [1, 3, 4]] == 0)
    np.testing.assert_allclose(p.sum(1), 1.0)
    out, p = oracles.naive_attention(q, k, v, visible=np.zeros(5, bool))
    assert np.all(out == 0) and np.all(p == 0)


def test_finite_difference_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(oracles.finite_difference(lambda a: (a ** 2).sum(), x), 2 * x, atol=1e-8)
    with pytest.raises(ValueError):
        oracles.finite_difference(lambda a: a.sum(), x, h=0)


def test_topk_examples():
    assert oracles.naive_topk([5, 4, 3, 2, 1], 3) == [0, 1, 2]
    assert oracles.naive_topk([0.9, 0.1, 0.4, 0.4], 2) == [0, 2]
    assert oracles.naive_topk([0, 0, 0, 0], 2) == [0, 1]


def test_pools():
    vol = np.array([[[1.0, 2.0], [3.0, 0.0]], [[5.0, -1.0], [7.0, 4.0]]])
    avg, mx = oracles.naive_pool(vol)
    np.testing.assert_allclose(avg, [4.0, 1.25])
    np.testing.assert_allclose(mx, [7.0, 4.0])
    avg, mx = oracles.naive_pool(vol, visible=np.array([[True, False], [False, False]]))
    np.testing.assert_allclose(avg, [1.0, 2.0])
    with pytest.raises(ValueError):
        oracles.naive_pool(vol, visible=np.zeros((2, 2), bool))
    avg, mx = oracles.naive_class_pool(np.array([[1.0, 4.0], [3.0, 0.0]]))
    np.testing.assert_allclose(avg, [2.0, 2.0])
    np.testing.assert_allclose(mx, [3.0, 4.0])


def test_reassemble_and_iou():
    c_f = np.ones((1, 2, 1, 1))
    c_b = np.full((1, 2, 1, 1), 3.0)
    mask = np.array([[True], [False]])
    np.testing.assert_allclose(oracles.naive_reassemble(c_f, c_b, mask).ravel(), [1.0, 3.0])
    np.testing.assert_allclose(oracles.naive_reassemble(c_f, c_b, mask, gate=0.25).ravel(), [2.5, 2.5])
    ious, miou = oracles.naive_iou([[0, 1]], [[0, 1]], 3)
    assert ious == [1.0, 1.0, None] and miou == 1.0
    ious, miou = oracles.naive_iou([[0, 0]], [[0, 1]], 2)
    assert ious == [0.5, 0.0] and miou == 0.25


def test_shifted_grouping():
    groups = [oracles.shifted_window_group(i, 4, 2, 1) for i in range(4)]
    assert groups == [-1, 0, 0, 1]


def test_linear_probe_recovers_separable_labels():
    rng = np.random.default_rng(1)
    centers = np.eye(3) * 3
    labels = rng.integers(0, 3, 200)
    feats = centers[labels] + 0.1 * rng.normal(size=(200, 3))
    w = oracles.fit_linear_probe(feats, labels, 3)
    assert (oracles.apply_linear_probe(w, feats) == labels).all()
    emb = centers[labels[:4]].reshape(2, 2, 3)
    assert (oracles.linear_probe_predict(emb, centers).ravel() == labels[:4]).all()
