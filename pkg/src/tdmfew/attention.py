"""Learned channel attention: fully-connected score-to-weight blocks and
their composition into per-class task weights.

The support attention path (``sam``) turns each class prototype's intra and
inter score vectors into two weight vectors and blends them with ``alpha``.
The query attention path (``qam``) does the same with a query map's intra
scores. ``compose_task_weights`` blends the two with ``beta`` into one
weight vector per class, which rescales every feature map channel of that
class. ``iam_forward`` applies the same score-to-weight mechanism to each
instance independently inside the feature extractor.

All weight vectors come out of a ``1 + tanh`` head, so they live in (0, 2)
at evaluation time; during training, uniform noise plus a [0, 2] clamp
regularizes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from . import scores as sc
from .numeric import BatchNormParams, Rng, ShapeError, Tensor


@dataclass
class TdmConfig:
    """Hyperparameters and module switches for the attention stack."""

    alpha: float = 0.5          # support blend: intra vs inter weights
    beta: float = 0.5           # task blend: support vs query weights
    noise_half_width: float = 0.2
    clamp_lo: float = 0.0
    clamp_hi: float = 2.0
    sam: bool = True
    qam: bool = True
    iam: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0,1], got {self.beta}")


class FcBlock:
    """Two-layer block mapping a (B, C) score batch to (B, C) weights.

    Layout: linear C -> 2C, batch norm, ReLU, linear 2C -> C, then a fixed
    ``1 + tanh`` head. The second linear's bias starts at zero so initial
    weights sit near 1 (near-identity attention).
    """

    def __init__(self, width: int, rng: Rng):
        self.width = width
        hidden = 2 * width
        a1 = (1.0 / width) ** 0.5
        # Tighter bound on the output layer so fresh blocks emit weights
        # close to 1: untrained near-identity attention must not wreck the
        # features it scales.
        a2 = 1.0 / hidden
        self.w1 = nm.parameter(rng.uniform(-a1, a1, (hidden, width)))
        self.b1 = nm.parameter(np.zeros(hidden))
        self.bn = BatchNormParams(hidden)
        self.w2 = nm.parameter(rng.uniform(-a2, a2, (width, hidden)))
        self.b2 = nm.parameter(np.zeros(width))

    def parameters(self):
        return [self.w1, self.b1, *self.bn.parameters(), self.w2, self.b2]

    def buffers(self):
        return self.bn.buffers()


def fc_forward(block: FcBlock, score_batch, mode: str, rng: Rng | None,
               config: TdmConfig) -> Tensor:
    """Run a score batch through a block; returns same-shape weights.

    Train mode adds uniform noise in ±noise_half_width and clamps to
    [clamp_lo, clamp_hi]; eval mode returns the raw (0, 2) head output.
    """
    x = score_batch if isinstance(score_batch, Tensor) else nm.constant(score_batch)
    single = x.ndim == 1
    if single:
        x = nm.reshape(x, (1,) + x.shape)
    if x.ndim != 2 or x.shape[1] != block.width:
        raise ShapeError(f"fc_forward: scores {x.shape} vs block width {block.width}")
    h = nm.linear(x, block.w1, block.b1)
    h = nm.batchnorm(h, block.bn, mode)
    h = nm.relu(h)
    h = nm.linear(h, block.w2, block.b2)
    out = nm.one_plus_tanh(h)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode fc_forward needs an rng for the noise draw")
        out = nm.add_noise(out, rng, -config.noise_half_width, config.noise_half_width)
        out = nm.clamp(out, config.clamp_lo, config.clamp_hi)
    return nm.reshape(out, (block.width,)) if single else out


def sam(prototypes, b_intra: FcBlock, b_inter: FcBlock, config: TdmConfig,
        mode: str, rng: Rng | None) -> Tensor:
    """Support weight vectors, one per class: (N, C, H, W) -> (N, C).

    Blends the intra- and inter-score weight vectors with ``alpha``; the
    endpoints select the corresponding vector bitwise. The N classes form
    the batch fed to each block.
    """
    if isinstance(prototypes, (list, tuple)):
        prototypes = nm.stack0(prototypes)
    if prototypes.ndim != 4:
        raise ShapeError(f"sam expects (N,C,H,W) prototypes, got {prototypes.shape}")
    if prototypes.shape[0] < 2:
        raise ShapeError("sam needs N >= 2: inter scores minimize over the other "
                         "classes, which is an empty set for N=1")
    r_intra = sc.intra_scores(prototypes)
    r_inter = sc.inter_scores(prototypes)
    if config.alpha == 1.0:
        return fc_forward(b_intra, r_intra, mode, rng, config)
    if config.alpha == 0.0:
        return fc_forward(b_inter, r_inter, mode, rng, config)
    w_intra = fc_forward(b_intra, r_intra, mode, rng, config)
    w_inter = fc_forward(b_inter, r_inter, mode, rng, config)
    return nm.add(nm.mul(w_intra, config.alpha), nm.mul(w_inter, 1.0 - config.alpha))


def qam(query_maps, b_q: FcBlock, mode: str, rng: Rng | None,
        config: TdmConfig) -> Tensor:
    """Query weight vector(s): (C, H, W) -> (C,), or (Q, C, H, W) -> (Q, C).

    The query's own intra scores go through the block; nothing from the
    support set is used.
    """
    return fc_forward(b_q, sc.intra_scores(query_maps), mode, rng, config)


def compose_task_weights(w_support, w_query, beta: float,
                         n_way: int | None = None,
                         channels: int | None = None) -> Tensor:
    """Per-class task weights: beta * w_support + (1 - beta) * w_query.

    ``w_support`` is (N, C); ``w_query`` is (C,) for one query (-> (N, C))
    or (Q, C) for a batch (-> (Q, N, C)). A disabled constituent passes
    None and acts as all-ones; with both None the result is exactly ones
    (``n_way``/``channels`` must then be given) and task weighting is a
    no-op.
    """
    if w_support is None and w_query is None:
        if n_way is None or channels is None:
            raise ValueError("compose_task_weights: both inputs None needs n_way and channels")
        return nm.constant(np.ones((n_way, channels)))
    if w_support is None:
        c = w_query.shape[-1]
        w_support = nm.constant(np.ones((n_way if n_way else 1, c)))
    if w_query is None:
        w_query = nm.constant(np.ones(w_support.shape[-1]))

    n, c = w_support.shape
    batched = w_query.ndim == 2
    target = (w_query.shape[0], n, c) if batched else (n, c)
    if w_query.shape[-1] != c:
        raise ShapeError(f"task weight widths differ: {w_support.shape} vs {w_query.shape}")

    if beta == 1.0:
        return w_support if target == (n, c) else nm.broadcast_to(
            nm.reshape(w_support, (1, n, c)), target)
    wq = nm.reshape(w_query, (w_query.shape[0], 1, c)) if batched else nm.reshape(w_query, (1, c))
    if beta == 0.0:
        return nm.broadcast_to(wq, target)
    ws = nm.reshape(w_support, (1, n, c)) if batched else w_support
    return nm.add(nm.mul(ws, beta), nm.mul(wq, 1.0 - beta))


def apply_to_support(support_maps, task_weights) -> Tensor:
    """Scale every channel of class i's support maps by its task weight.

    ``support_maps`` is (N, K, C, H, W) grouped by class (or a list of N
    (K, C, H, W) groups); ``task_weights`` is (N, C).
    """
    if isinstance(support_maps, (list, tuple)):
        support_maps = nm.stack0(support_maps)
    if support_maps.ndim != 5:
        raise ShapeError(f"apply_to_support expects (N,K,C,H,W), got {support_maps.shape}")
    n, _, c = support_maps.shape[:3]
    if task_weights.shape != (n, c):
        raise ShapeError(f"task weights {task_weights.shape} vs support {support_maps.shape}")
    w = nm.reshape(task_weights, (n, 1, c, 1, 1))
    return nm.mul(support_maps, w)


def apply_to_query(query_map, task_weights) -> Tensor:
    """Produce one weighted copy of the query map per candidate class.

    (C, H, W) with (N, C) weights -> (N, C, H, W); a (Q, C, H, W) batch
    with (Q, N, C) weights -> (Q, N, C, H, W). Copy i is the one scored
    against class i.
    """
    if query_map.ndim == 3:
        c = query_map.shape[0]
        n = task_weights.shape[0]
        if task_weights.shape != (n, c):
            raise ShapeError(f"task weights {task_weights.shape} vs query {query_map.shape}")
        w = nm.reshape(task_weights, (n, c, 1, 1))
        return nm.mul(nm.reshape(query_map, (1,) + query_map.shape), w)
    if query_map.ndim == 4:
        q, c = query_map.shape[0], query_map.shape[1]
        if task_weights.ndim != 3 or task_weights.shape[0] != q or task_weights.shape[2] != c:
            raise ShapeError(f"task weights {task_weights.shape} vs queries {query_map.shape}")
        w = nm.reshape(task_weights, task_weights.shape + (1, 1))
        qm = nm.reshape(query_map, (q, 1, c) + query_map.shape[2:])
        return nm.mul(qm, w)
    raise ShapeError(f"apply_to_query expects (C,H,W) or (Q,C,H,W), got {query_map.shape}")


def iam_forward(block: FcBlock, intermediate, mode: str, rng: Rng | None,
                config: TdmConfig) -> Tensor:
    """Instance attention inside the extractor: rescale each instance's
    channels by weights computed from its own intra scores.

    ``intermediate`` is (B, C, H, W); instances do not interact except
    through train-mode batch-norm statistics in the block.
    """
    if intermediate.ndim != 4:
        raise ShapeError(f"iam_forward expects (B,C,H,W), got {intermediate.shape}")
    if intermediate.shape[1] != block.width:
        raise ShapeError(f"iam_forward: {intermediate.shape[1]} channels vs "
                         f"block width {block.width}")
    w = fc_forward(block, sc.intra_scores(intermediate), mode, rng, config)
    return nm.mul(intermediate, nm.reshape(w, w.shape + (1, 1)))


def dump_weights_csv(path, episode_index: int, w_intra, w_inter, w_support,
                     w_query, w_task) -> None:
    """Append one episode's weight vectors as CSV rows for offline plots.

    Expects per-class (N, C) arrays for the intra/inter/support/task
    vectors and a single (C,) query vector (pick one query, or an average,
    before calling). Columns: episode, class, channel, w_intra, w_inter,
    w_S, w_Q, w_T.
    """
    arrs = [np.asarray(a) for a in (w_intra, w_inter, w_support, w_task)]
    wq = np.asarray(w_query)
    n, c = arrs[0].shape
    header_needed = True
    try:
        with open(path) as fh:
            header_needed = fh.readline() == ""
    except FileNotFoundError:
        pass
    with open(path, "a") as fh:
        if header_needed:
            fh.write("episode,class,channel,w_intra,w_inter,w_S,w_Q,w_T\n")
        for i in range(n):
            for ch in range(c):
                fh.write(f"{episode_index},{i},{ch},"
                         f"{arrs[0][i, ch]:.9g},{arrs[1][i, ch]:.9g},"
                         f"{arrs[2][i, ch]:.9g},{wq[ch]:.9g},{arrs[3][i, ch]:.9g}\n")
