"""End-to-end episodic model: extractor, attention stack, metric head.

``forward_episode`` runs one N-way K-shot task through the full pipeline:
features for all support and query images in one batch, per-class
prototypes, support/query attention weights, the blended per-class task
weights, and softmax class probabilities from the weighted distances.
With every attention switch off the forward reduces to the plain
prototype-network path, bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from . import scores as sc
from . import tensorio
from .attention import FcBlock, TdmConfig, compose_task_weights, qam, sam
from .backbone import extract, init_backbone
from .data import Episode
from .head import DEFAULT_TEMPERATURE
from .numeric import Rng, Tensor


@dataclass
class EpisodeResult:
    loss: Tensor
    probabilities: np.ndarray    # (Q, N)
    accuracy: float
    distances: Tensor            # (Q, N)
    weights: dict | None = None  # optional attention internals


class TdmModel:
    """Parameters and configuration of the full pipeline."""

    def __init__(self, rng: Rng, channels: int = 64, in_channels: int = 3,
                 tdm: TdmConfig | None = None, metric: str = "euclidean",
                 temperature: float = DEFAULT_TEMPERATURE,
                 distance_on: str = "pooled", iam_after=(1, 2)):
        if metric not in ("euclidean", "cosine"):
            raise ValueError(f"metric must be 'euclidean' or 'cosine', got {metric!r}")
        if distance_on not in ("pooled", "flattened"):
            raise ValueError(f"distance_on must be 'pooled' or 'flattened', got {distance_on!r}")
        self.tdm = tdm if tdm is not None else TdmConfig()
        self.channels = channels
        self.in_channels = in_channels
        self.metric = metric
        self.temperature = temperature
        self.distance_on = distance_on
        self.iam_after = tuple(iam_after)
        # Child streams keep the backbone init identical across attention
        # configurations sharing a seed, so ablations start from the same
        # extractor.
        self.backbone = init_backbone(rng.child(0), channels, in_channels,
                                      self.iam_after if self.tdm.iam else ())
        self.b_intra = FcBlock(channels, rng.child(1)) if self.tdm.sam else None
        self.b_inter = FcBlock(channels, rng.child(2)) if self.tdm.sam else None
        self.b_q = FcBlock(channels, rng.child(3)) if self.tdm.qam else None

    # ------------------------------------------------------------------
    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_parameters(self):
        names = []
        for i, block in enumerate(self.backbone.blocks, start=1):
            prefix = f"backbone.block{i}"
            names += [(f"{prefix}.kernel", block.kernel), (f"{prefix}.bias", block.bias),
                      (f"{prefix}.bn.gamma", block.bn.gamma), (f"{prefix}.bn.beta", block.bn.beta)]
        for idx in sorted(self.backbone.iam_blocks):
            names += self._fc_names(f"iam{idx}", self.backbone.iam_blocks[idx])
        for label, blk in (("b_intra", self.b_intra), ("b_inter", self.b_inter),
                           ("b_q", self.b_q)):
            if blk is not None:
                names += self._fc_names(label, blk)
        return names

    @staticmethod
    def _fc_names(prefix: str, blk: FcBlock):
        return [(f"{prefix}.w1", blk.w1), (f"{prefix}.b1", blk.b1),
                (f"{prefix}.bn.gamma", blk.bn.gamma), (f"{prefix}.bn.beta", blk.bn.beta),
                (f"{prefix}.w2", blk.w2), (f"{prefix}.b2", blk.b2)]

    def named_buffers(self):
        out = []
        for i, block in enumerate(self.backbone.blocks, start=1):
            out += [(f"backbone.block{i}.bn.running_mean", block.bn),
                    (f"backbone.block{i}.bn.running_var", block.bn)]
        for idx in sorted(self.backbone.iam_blocks):
            out += [(f"iam{idx}.bn.running_mean", self.backbone.iam_blocks[idx].bn),
                    (f"iam{idx}.bn.running_var", self.backbone.iam_blocks[idx].bn)]
        for label, blk in (("b_intra", self.b_intra), ("b_inter", self.b_inter),
                           ("b_q", self.b_q)):
            if blk is not None:
                out += [(f"{label}.bn.running_mean", blk.bn),
                        (f"{label}.bn.running_var", blk.bn)]
        return out

    def state_arrays(self) -> dict:
        state = {name: t.data for name, t in self.named_parameters()}
        for name, bn in self.named_buffers():
            state[name] = bn.running_mean if name.endswith("running_mean") else bn.running_var
        return state

    def load_state_arrays(self, state: dict) -> None:
        for name, t in self.named_parameters():
            t.data = np.ascontiguousarray(state[name])
        for name, bn in self.named_buffers():
            arr = np.ascontiguousarray(state[name])
            if name.endswith("running_mean"):
                bn.running_mean = arr
            else:
                bn.running_var = arr

    def meta(self) -> dict:
        return {
            "channels": self.channels, "in_channels": self.in_channels,
            "metric": self.metric, "temperature": self.temperature,
            "distance_on": self.distance_on, "iam_after": list(self.iam_after),
            "tdm": {"alpha": self.tdm.alpha, "beta": self.tdm.beta,
                    "noise_half_width": self.tdm.noise_half_width,
                    "clamp_lo": self.tdm.clamp_lo, "clamp_hi": self.tdm.clamp_hi,
                    "sam": self.tdm.sam, "qam": self.tdm.qam, "iam": self.tdm.iam},
        }

    # ------------------------------------------------------------------
    def forward_episode(self, episode: Episode, mode: str,
                        rng: Rng | None = None,
                        want_weights: bool = False) -> EpisodeResult:
        """Loss, probabilities, and accuracy for one episode."""
        n, k, u = episode.n_way, episode.k_shot, episode.n_query
        images = np.concatenate([episode.support_flat(), episode.query_flat()])
        feats = extract(self.backbone, images, mode, iam_enabled=self.tdm.iam,
                        rng=rng, tdm_config=self.tdm)
        c, h, w = feats.shape[1:]
        fs = nm.reshape(nm.slice0(feats, 0, n * k), (n, k, c, h, w))
        fq = nm.slice0(feats, n * k, n * k + n * u)
        protos = sc.prototype(fs)

        weights = None
        if not self.tdm.sam and not self.tdm.qam:
            d = self._distances(protos, fq, None)
        else:
            w_s = sam(protos, self.b_intra, self.b_inter, self.tdm, mode, rng) \
                if self.tdm.sam else None
            w_q = qam(fq, self.b_q, mode, rng, self.tdm) if self.tdm.qam else None
            w_t = compose_task_weights(w_s, w_q, self.tdm.beta, n_way=n, channels=c)
            d = self._distances(protos, fq, w_t)
            if want_weights:
                weights = {
                    "w_support": None if w_s is None else w_s.data.copy(),
                    "w_query": None if w_q is None else w_q.data.copy(),
                    "w_task": w_t.data.copy(),
                }

        labels = episode.query_labels()
        loss, probs = nm.softmax_cross_entropy(nm.mul(d, -1.0), labels)
        acc = float((probs.argmax(axis=1) == labels).mean())
        return EpisodeResult(loss, probs, acc, d, weights)

    def _distances(self, protos: Tensor, fq: Tensor, w_t: Tensor | None) -> Tensor:
        """(Q, N) distances between weighted prototypes and query copies.

        The task weights multiply the pooled prototype and query
        embeddings (pooling commutes with channel scaling); ``w_t`` of
        None means no weighting at all, which is the plain baseline path.
        """
        n = protos.shape[0]
        q = fq.shape[0]
        c = protos.shape[1]

        if self.metric == "euclidean" and self.distance_on == "flattened":
            pr = nm.reshape(protos, (1,) + protos.shape)
            qr = nm.reshape(fq, (q, 1) + fq.shape[1:])
            diff = nm.sub(pr, qr)
            if w_t is not None:
                shape = w_t.shape + (1, 1)
                diff = nm.mul(diff, nm.reshape(w_t, shape))
            return nm.tsum(nm.mul(diff, diff), axis=(2, 3, 4))

        sp = nm.reshape(nm.global_avg_pool(protos), (1, n, c))
        sq = nm.reshape(nm.global_avg_pool(fq), (q, 1, c))

        if self.metric == "euclidean":
            diff = nm.sub(sp, sq)
            if w_t is not None:
                diff = nm.mul(diff, w_t)
            return nm.tsum(nm.mul(diff, diff), axis=2)

        # cosine
        if w_t is None:
            a, b = nm.broadcast_to(sp, (q, n, c)), nm.broadcast_to(sq, (q, n, c))
        else:
            w3 = w_t if w_t.ndim == 3 else nm.broadcast_to(
                nm.reshape(w_t, (1, n, c)), (q, n, c))
            a, b = nm.mul(w3, sp), nm.mul(w3, sq)
        na = nm.tsum(nm.mul(a, a), axis=2)
        nb = nm.tsum(nm.mul(b, b), axis=2)
        for name, norms in (("prototype", na), ("query", nb)):
            if (norms.data == 0.0).any():
                qi, ci = np.argwhere(norms.data == 0.0)[0]
                raise ValueError(f"cosine distance undefined: zero-norm pooled "
                                 f"{name} embedding at query {qi}, class {ci}")
        cos = nm.div(nm.tsum(nm.mul(a, b), axis=2), nm.sqrt(nm.mul(na, nb)))
        return nm.mul(nm.sub(1.0, cos), self.temperature)


def save_model(path, model: TdmModel, extra_meta: dict | None = None) -> None:
    """Checkpoint: tensor container plus JSON manifest of offsets and config."""
    meta = {"model": model.meta()}
    if extra_meta:
        meta.update(extra_meta)
    tensorio.save_with_manifest(path, model.state_arrays(), extra=meta)


def load_model(path) -> tuple[TdmModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, manifest meta)."""
    arrays, meta = tensorio.load_with_manifest(path)
    m = meta["model"]
    model = TdmModel(Rng(0), channels=m["channels"], in_channels=m["in_channels"],
                     tdm=TdmConfig(**m["tdm"]), metric=m["metric"],
                     temperature=m["temperature"], distance_on=m["distance_on"],
                     iam_after=tuple(m["iam_after"]))
    model.load_state_arrays(arrays)
    return model, meta
