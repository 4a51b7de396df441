"""Channel-wise representativeness scores over feature maps.

A feature map is a (C, H, W) tensor. Its *mean spatial map* is the average
over channels, an (H, W) summary of where activation mass sits. From it we
derive two nonnegative per-channel scores:

  * intra score: mean squared deviation of a channel from its own map's
    mean spatial map. Low means the channel tracks the map's salient
    regions.
  * inter score: minimum, over the other classes' prototypes, of the mean
    squared deviation of a channel from that class's mean spatial map.
    High means the channel looks unlike every other class, i.e. it is
    discriminative within the episode.

All functions accept a leading batch axis and stay inside the autodiff
graph, so attention blocks trained on these scores backpropagate through
the score computation into the feature extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .numeric import ShapeError, Tensor


def _as_batched(maps, ndim_single: int):
    """Lift a single map / list of maps to a batched tensor; note if lifted."""
    if isinstance(maps, (list, tuple)):
        maps = nm.stack0(maps)
    if not isinstance(maps, Tensor):
        maps = nm.constant(maps)
    if maps.ndim == ndim_single:
        return nm.reshape(maps, (1,) + maps.shape), True
    if maps.ndim == ndim_single + 1:
        return maps, False
    raise ShapeError(f"expected {ndim_single}-d or {ndim_single + 1}-d input, got {maps.shape}")


def prototype(class_support_maps) -> Tensor:
    """Elementwise mean of a class's K support maps.

    Accepts (K, C, H, W) (or a list of (C, H, W) maps) and returns
    (C, H, W); a batched (N, K, C, H, W) input returns (N, C, H, W).
    """
    if isinstance(class_support_maps, (list, tuple)):
        if len(class_support_maps) == 0:
            raise ShapeError("prototype of an empty support set")
        class_support_maps = nm.stack0(class_support_maps)
    if not isinstance(class_support_maps, Tensor):
        class_support_maps = nm.constant(class_support_maps)
    if class_support_maps.ndim == 4:
        if class_support_maps.shape[0] == 0:
            raise ShapeError("prototype of an empty support set")
        return nm.mean(class_support_maps, axis=0)
    if class_support_maps.ndim == 5:
        if class_support_maps.shape[1] == 0:
            raise ShapeError("prototype of an empty support set")
        return nm.mean(class_support_maps, axis=1)
    raise ShapeError(f"prototype expects (K,C,H,W) or (N,K,C,H,W), got {class_support_maps.shape}")


def mean_spatial(feature_map) -> Tensor:
    """Channel average of a (C, H, W) map -> (H, W); batched adds a lead axis."""
    batched, lifted = _as_batched(feature_map, 3)
    out = nm.mean(batched, axis=1)
    return nm.reshape(out, out.shape[1:]) if lifted else out


def intra_scores(feature_map) -> Tensor:
    """Per-channel mean squared deviation from the map's mean spatial map.

    (C, H, W) -> (C,); (B, C, H, W) -> (B, C). Entries are >= 0 and are 0
    exactly when the channel equals the mean spatial map.
    """
    batched, lifted = _as_batched(feature_map, 3)
    m = nm.mean(batched, axis=1, keepdims=True)
    diff = nm.sub(batched, m)
    scores = nm.mean(nm.mul(diff, diff), axis=(-2, -1))
    return nm.reshape(scores, scores.shape[1:]) if lifted else scores


def inter_scores(prototypes, class_index: int | None = None) -> Tensor:
    """Per-channel minimum squared distance to the other classes' mean maps.

    ``prototypes`` is (N, C, H, W) (or a list of N maps), N >= 2. Entry
    (i, c) is min over j != i of mean_{h,w} (P[i,c] - M_j)^2 where M_j is
    class j's mean spatial map. Returns (N, C), or row i if
    ``class_index`` is given. Exact ties have a well-defined value; the
    gradient follows the smallest qualifying class index.
    """
    if isinstance(prototypes, (list, tuple)):
        prototypes = nm.stack0(prototypes)
    if not isinstance(prototypes, Tensor):
        prototypes = nm.constant(prototypes)
    if prototypes.ndim != 4:
        raise ShapeError(f"inter_scores expects (N,C,H,W), got {prototypes.shape}")
    n, c, h, w = prototypes.shape
    if n < 2:
        raise ShapeError("inter_scores needs at least 2 classes: the minimum over "
                         "other classes is empty for N=1")

    m = nm.mean(prototypes, axis=1)                       # (N, H, W)
    p = nm.reshape(prototypes, (n, 1, c, h, w))
    mx = nm.reshape(m, (1, n, 1, h, w))
    diff = nm.sub(p, mx)
    dist = nm.mean(nm.mul(diff, diff), axis=(-2, -1))     # (N, N, C): i vs M_j

    masked = dist.data.copy()
    rows = np.arange(n)
    masked[rows, rows, :] = np.inf
    jstar = masked.argmin(axis=1)                         # (N, C), first min on ties
    flat = (rows[:, None] * n + jstar) * c + np.arange(c)[None, :]
    out = nm.take_flat(dist, flat, (n, c))
    if class_index is not None:
        out = nm.slice0(out, class_index, class_index + 1)
        out = nm.reshape(out, (c,))
    return out


@dataclass
class VarianceReport:
    """Per-class, per-channel statistics of spatially pooled activations."""

    class_ids: list
    means: np.ndarray       # (n_classes, C): mean pooled activation
    variances: np.ndarray   # (n_classes, C): population variance
    counts: np.ndarray      # (n_classes,): instances per class

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("class_id,channel,mean,variance\n")
            for ci, cid in enumerate(self.class_ids):
                for ch in range(self.means.shape[1]):
                    fh.write(f"{cid},{ch},{self.means[ci, ch]:.17g},"
                             f"{self.variances[ci, ch]:.17g}\n")


def variance_report(maps_by_class: dict) -> VarianceReport:
    """Channel-activation spread within each class (a diagnostics facility).

    ``maps_by_class`` maps class id -> (J, C, H, W) array of feature maps.
    For each instance the channel activations are spatially averaged; the
    report holds their per-class mean and population variance.
    """
    class_ids, means, variances, counts = [], [], [], []
    for cid, maps in maps_by_class.items():
        arr = maps.data if isinstance(maps, Tensor) else np.asarray(maps, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] == 0:
            raise ShapeError(f"class {cid}: expected nonempty (J,C,H,W), got {arr.shape}")
        pooled = arr.mean(axis=(2, 3))                    # (J, C)
        # Mean via deviations from the first sample: exactly zero variance
        # for identical instances, where a plain mean can round off-value.
        mu = pooled[0] + (pooled - pooled[0]).mean(axis=0)
        class_ids.append(cid)
        means.append(mu)
        variances.append(((pooled - mu) ** 2).mean(axis=0))
        counts.append(arr.shape[0])
    return VarianceReport(class_ids, np.array(means), np.array(variances),
                          np.array(counts))
