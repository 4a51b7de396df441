import math

import numpy as np
import pytest

from tdmfew import head
from tdmfew import numeric as nm
from tdmfew.attention import apply_to_query, apply_to_support
from tdmfew.checks import oracle_pooled
from tdmfew.numeric import Rng


def test_pooled_constant_channel():
    fmap = np.full((3, 2, 2), 0.0)
    fmap[1] = 4.5
    out = head.pooled(nm.constant(fmap))
    assert out.data.tolist() == [0.0, 4.5, 0.0]


def test_pooled_commutes_with_channel_scaling():
    rng = Rng(0)
    fmap = rng.normal(1.0, (4, 3, 3))
    w = rng.uniform(0, 2, 4)
    scaled = head.pooled(nm.constant(fmap * w[:, None, None])).data
    assert np.abs(scaled - w * head.pooled(nm.constant(fmap)).data).max() < 1e-12


def test_pooled_matches_loop_oracle():
    fmap = Rng(1).normal(1.0, (5, 4, 2))
    assert np.abs(head.pooled(nm.constant(fmap)).data - oracle_pooled(fmap)).max() < 1e-12


def nmaps(seed, n=3, c=4, h=2, w=2):
    return nm.constant(Rng(seed).normal(1.0, (n, c, h, w)))


def test_equal_distances_give_uniform_probabilities():
    maps = nmaps(2)
    logits = head.class_probabilities(maps, maps)  # d_i = 0 for every class
    assert np.allclose(logits.probabilities, 1.0 / 3.0, atol=1e-15)


def test_closed_form_two_class_probabilities():
    # engineered pooled embeddings: d = (0, ln 3)
    r = math.sqrt(math.log(3.0))
    protos = np.zeros((2, 1, 1, 1))
    queries = np.zeros((2, 1, 1, 1))
    queries[1, 0, 0, 0] = r
    logits = head.class_probabilities(nm.constant(protos), nm.constant(queries))
    assert abs(logits.probabilities[0] - 0.75) < 1e-12
    assert abs(logits.probabilities[1] - 0.25) < 1e-12


def test_probabilities_form_a_simplex():
    for seed in range(5):
        logits = head.class_probabilities(nmaps(seed), nmaps(seed + 100), metric="euclidean")
        p = logits.probabilities
        assert (p > 0).all()
        assert abs(p.sum() - 1.0) < 1e-9


def test_distance_shift_leaves_probabilities_unchanged():
    d = Rng(3).uniform(0, 5, 4)
    p1 = head._softmax_neg(d)
    p2 = head._softmax_neg(d + 7.25)
    assert np.abs(p1 - p2).max() < 1e-9


def test_euclidean_distance_is_symmetric():
    a, b = nmaps(4), nmaps(5)
    d_ab = head.class_probabilities(a, b).distances.data
    d_ba = head.class_probabilities(b, a).distances.data
    assert np.abs(d_ab - d_ba).max() < 1e-12


def test_all_ones_weights_equal_plain_head_bitwise():
    protos = nmaps(6)
    query = nm.constant(Rng(7).normal(1.0, (4, 2, 2)))
    ones = nm.constant(np.ones((3, 4)))
    support_stack = nm.reshape(protos, (3, 1, 4, 2, 2))
    weighted_protos = nm.reshape(apply_to_support(support_stack, ones), (3, 4, 2, 2))
    weighted_queries = apply_to_query(query, ones)
    plain_queries = nm.stack0([query, query, query])
    a = head.class_probabilities(weighted_protos, weighted_queries)
    b = head.class_probabilities(protos, plain_queries)
    assert (a.probabilities == b.probabilities).all()
    assert (a.distances.data == b.distances.data).all()


def test_cosine_scale_invariance():
    protos = nmaps(8)
    queries = nmaps(9)
    base = head.class_probabilities(protos, queries, metric="cosine")
    scaled = head.class_probabilities(nm.mul(protos, 37.5), queries, metric="cosine")
    assert np.abs(base.probabilities - scaled.probabilities).max() < 1e-9


def test_cosine_zero_norm_fails_naming_instance():
    protos = nmaps(10)
    queries = nm.constant(np.zeros((3, 4, 2, 2)))
    with pytest.raises(ValueError, match="query copy 0"):
        head.class_probabilities(protos, queries, metric="cosine")


def test_flattened_distance_differs_from_pooled_but_same_simplex():
    protos, queries = nmaps(11), nmaps(12)
    pooled_logits = head.class_probabilities(protos, queries, distance_on="pooled")
    flat_logits = head.class_probabilities(protos, queries, distance_on="flattened")
    assert not np.allclose(pooled_logits.distances.data, flat_logits.distances.data)
    assert abs(flat_logits.probabilities.sum() - 1.0) < 1e-9


def test_episode_loss_examples():
    # nearly-perfect probabilities -> loss near 0
    d = nm.constant(np.array([[0.0, 50.0], [50.0, 0.0]]))
    loss = head.episode_loss(d, [0, 1])
    assert loss.item() < 1e-9
    # uniform probabilities, N=5 -> ln 5
    d = nm.constant(np.zeros((3, 5)))
    assert abs(head.episode_loss(d, [0, 1, 2]).item() - math.log(5.0)) < 1e-12


def test_episode_loss_accepts_per_query_logits():
    logits = [head.class_probabilities(nmaps(s), nmaps(s + 50)) for s in range(3)]
    loss = head.episode_loss(logits, [0, 1, 2])
    assert np.isfinite(loss.item())


def test_episode_loss_gradient_follows_softmax_rule():
    d0 = Rng(13).uniform(0, 3, (4, 3))
    dt = nm.parameter(d0)
    loss = head.episode_loss(dt, [0, 1, 2, 0])
    loss.backward()
    p = head._softmax_neg(d0)
    onehot = np.zeros((4, 3))
    onehot[np.arange(4), [0, 1, 2, 0]] = 1.0
    # d(loss)/d(distance) = -(p - onehot)/B
    assert np.abs(dt.grad + (p - onehot) / 4.0).max() < 1e-9


def test_episode_accuracy_examples():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5], [0.1, 0.9]])
    assert head.episode_accuracy(probs, [0, 1, 0, 1]) == 1.0  # tie -> class 0
    assert head.episode_accuracy(probs, [1, 0, 1, 0]) == 0.0
    assert head.episode_accuracy(probs, [0, 0, 0, 0]) == 0.5


def test_accuracy_invariant_to_distance_shift():
    d = Rng(14).uniform(0, 5, (6, 4))
    labels = [0, 1, 2, 3, 0, 1]
    a = head.episode_accuracy(head._softmax_neg(d), labels)
    b = head.episode_accuracy(head._softmax_neg(d + 3.0), labels)
    assert a == b
