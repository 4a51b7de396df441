"""Metric head: pooled embeddings, distances, probabilities, loss.

Each query is scored against every class by a distance between the
class's (adaptively weighted) prototype and the matching weighted copy of
the query map; class probabilities are the softmax of the negated
distances. Distances default to squared Euclidean between spatially
pooled embeddings; cosine distance and full flattened-map distances are
available as switches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .numeric import ShapeError, Tensor

DEFAULT_TEMPERATURE = 10.0


def pooled(adaptive_map) -> Tensor:
    """Global average pool: (C, H, W) -> (C,), (B, C, H, W) -> (B, C)."""
    x = adaptive_map if isinstance(adaptive_map, Tensor) else nm.constant(adaptive_map)
    return nm.global_avg_pool(x)


def _softmax_neg(distances: np.ndarray) -> np.ndarray:
    """Softmax of -d along the last axis, rounding-stable under permutation.

    Subtracting the max and summing the exponentials in ascending order
    makes the result bitwise equivariant to reordering the classes.
    """
    z = -np.asarray(distances, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    return e / np.sort(e, axis=-1).sum(axis=-1, keepdims=True)


@dataclass
class EpisodeLogits:
    """Per-query distances and class probabilities.

    ``distances`` stays in the autodiff graph so a loss built from it
    trains the model; ``probabilities`` is a plain array on the simplex.
    """

    distances: Tensor           # (N,)
    probabilities: np.ndarray   # (N,), positive, sums to 1
    metric: str = "euclidean"
    temperature: float = field(default=DEFAULT_TEMPERATURE)


def _pool_stack(maps) -> Tensor:
    if isinstance(maps, (list, tuple)):
        maps = nm.stack0(maps)
    if not isinstance(maps, Tensor):
        maps = nm.constant(maps)
    if maps.ndim != 4:
        raise ShapeError(f"expected N maps (N,C,H,W), got {maps.shape}")
    return maps


def class_probabilities(adaptive_prototypes, adaptive_query_maps,
                        metric: str = "euclidean",
                        temperature: float = DEFAULT_TEMPERATURE,
                        distance_on: str = "pooled") -> EpisodeLogits:
    """Score one query against N classes.

    Inputs are the N weighted prototypes and the N weighted copies of the
    query map, index-matched by class. Euclidean d_i is the summed squared
    difference (pooled embeddings by default, full maps with
    ``distance_on='flattened'``); cosine d_i is
    temperature * (1 - cos(pooled_i, pooled_i)).
    """
    protos = _pool_stack(adaptive_prototypes)
    queries = _pool_stack(adaptive_query_maps)
    if protos.shape != queries.shape:
        raise ShapeError(f"prototype/query map shapes differ: "
                         f"{protos.shape} vs {queries.shape}")
    n = protos.shape[0]

    if metric == "euclidean":
        if distance_on == "pooled":
            a, b = nm.global_avg_pool(protos), nm.global_avg_pool(queries)
            diff = nm.sub(a, b)
            d = nm.tsum(nm.mul(diff, diff), axis=1)
        elif distance_on == "flattened":
            diff = nm.sub(protos, queries)
            d = nm.tsum(nm.mul(diff, diff), axis=(1, 2, 3))
        else:
            raise ValueError(f"distance_on must be 'pooled' or 'flattened', got {distance_on!r}")
    elif metric == "cosine":
        a, b = nm.global_avg_pool(protos), nm.global_avg_pool(queries)
        na = nm.tsum(nm.mul(a, a), axis=1)
        nb = nm.tsum(nm.mul(b, b), axis=1)
        for name, norms in (("prototype", na), ("query copy", nb)):
            zero = np.flatnonzero(norms.data == 0.0)
            if zero.size:
                raise ValueError(f"cosine distance undefined: {name} {zero[0]} "
                                 f"has a zero-norm pooled embedding")
        cos = nm.div(nm.tsum(nm.mul(a, b), axis=1), nm.sqrt(nm.mul(na, nb)))
        d = nm.mul(nm.sub(1.0, cos), temperature)
    else:
        raise ValueError(f"metric must be 'euclidean' or 'cosine', got {metric!r}")

    probs = _softmax_neg(d.data)
    assert probs.shape == (n,)
    return EpisodeLogits(distances=d, probabilities=probs, metric=metric,
                         temperature=temperature)


def episode_loss(all_query_logits, labels) -> Tensor:
    """Mean negative log probability of the true class over all queries.

    ``all_query_logits`` is a list of per-query :class:`EpisodeLogits` (or
    a ready (Q, N) distance tensor); ``labels`` are episode-local indices.
    """
    if isinstance(all_query_logits, Tensor):
        d = all_query_logits
    else:
        d = nm.stack0([lg.distances for lg in all_query_logits])
    loss, _ = nm.softmax_cross_entropy(nm.mul(d, -1.0), labels)
    return loss


def episode_accuracy(logits, labels) -> float:
    """Fraction of queries whose argmax probability matches the label.

    Accepts a list of :class:`EpisodeLogits` or a (Q, N) probability
    array. Argmax ties resolve to the smallest class index.
    """
    if isinstance(logits, np.ndarray):
        probs = logits
    else:
        probs = np.stack([lg.probabilities for lg in logits])
    labels = np.asarray(labels, dtype=np.int64)
    pred = probs.argmax(axis=1)
    return float((pred == labels).mean())
