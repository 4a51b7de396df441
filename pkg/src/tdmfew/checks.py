"""Self-contained correctness checks: naive loop oracles for the score
math and a finite-difference gradient check of the full pipeline.

The oracles here are deliberately dumb (explicit Python loops, no shared
code with the vectorized implementations) so they stay independent of the
paths they validate.
"""

from __future__ import annotations

import numpy as np

from . import numeric as nm
from . import scores as sc
from .attention import TdmConfig, apply_to_query, apply_to_support
from .data import Episode
from .model import TdmModel
from .numeric import Rng


# ---------------------------------------------------------------------------
# loop oracles


def oracle_prototype(maps: np.ndarray) -> np.ndarray:
    k, c, h, w = maps.shape
    out = np.zeros((c, h, w))
    for j in range(k):
        for ci in range(c):
            for hi in range(h):
                for wi in range(w):
                    out[ci, hi, wi] += maps[j, ci, hi, wi]
    return out / k


def oracle_mean_spatial(fmap: np.ndarray) -> np.ndarray:
    c, h, w = fmap.shape
    out = np.zeros((h, w))
    for hi in range(h):
        for wi in range(w):
            acc = 0.0
            for ci in range(c):
                acc += fmap[ci, hi, wi]
            out[hi, wi] = acc / c
    return out


def oracle_intra(fmap: np.ndarray) -> np.ndarray:
    c, h, w = fmap.shape
    m = oracle_mean_spatial(fmap)
    out = np.zeros(c)
    for ci in range(c):
        acc = 0.0
        for hi in range(h):
            for wi in range(w):
                acc += (fmap[ci, hi, wi] - m[hi, wi]) ** 2
        out[ci] = acc / (h * w)
    return out


def oracle_inter(protos: np.ndarray) -> np.ndarray:
    n, c, h, w = protos.shape
    means = [oracle_mean_spatial(protos[j]) for j in range(n)]
    out = np.zeros((n, c))
    for i in range(n):
        for ci in range(c):
            best = np.inf
            for j in range(n):
                if j == i:
                    continue
                acc = 0.0
                for hi in range(h):
                    for wi in range(w):
                        acc += (protos[i, ci, hi, wi] - means[j][hi, wi]) ** 2
                best = min(best, acc / (h * w))
            out[i, ci] = best
    return out


def oracle_apply_support(maps: np.ndarray, weights: np.ndarray) -> np.ndarray:
    n, k, c, h, w = maps.shape
    out = np.zeros_like(maps)
    for i in range(n):
        for j in range(k):
            for ci in range(c):
                for hi in range(h):
                    for wi in range(w):
                        out[i, j, ci, hi, wi] = weights[i, ci] * maps[i, j, ci, hi, wi]
    return out


def oracle_apply_query(fmap: np.ndarray, weights: np.ndarray) -> np.ndarray:
    n, c = weights.shape
    out = np.zeros((n,) + fmap.shape)
    for i in range(n):
        for ci in range(c):
            for hi in range(fmap.shape[1]):
                for wi in range(fmap.shape[2]):
                    out[i, ci, hi, wi] = weights[i, ci] * fmap[ci, hi, wi]
    return out


def oracle_pooled(fmap: np.ndarray) -> np.ndarray:
    c, h, w = fmap.shape
    out = np.zeros(c)
    for ci in range(c):
        acc = 0.0
        for hi in range(h):
            for wi in range(w):
                acc += fmap[ci, hi, wi]
        out[ci] = acc / (h * w)
    return out


def oracle_check(trials: int = 50, seed: int = 1) -> dict:
    """Compare the score/weight operations against the loop oracles.

    Runs ``trials`` random small cases per operation (C <= 8, H, W <= 4)
    and returns the maximum absolute error per operation name.
    """
    rng = Rng(seed)
    worst = {name: 0.0 for name in
             ("prototype", "mean_spatial", "intra_scores", "inter_scores",
              "apply_to_support", "apply_to_query", "pooled")}
    for _ in range(trials):
        c = int(rng.integers(1, 9))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        n = int(rng.integers(2, 5))

        maps = rng.normal(1.0, (k, c, h, w))
        got = sc.prototype(nm.constant(maps)).data
        worst["prototype"] = max(worst["prototype"],
                                 np.abs(got - oracle_prototype(maps)).max())

        fmap = rng.normal(1.0, (c, h, w))
        got = sc.mean_spatial(nm.constant(fmap)).data
        worst["mean_spatial"] = max(worst["mean_spatial"],
                                    np.abs(got - oracle_mean_spatial(fmap)).max())

        got = sc.intra_scores(nm.constant(fmap)).data
        worst["intra_scores"] = max(worst["intra_scores"],
                                    np.abs(got - oracle_intra(fmap)).max())

        protos = rng.normal(1.0, (n, c, h, w))
        got = sc.inter_scores(nm.constant(protos)).data
        worst["inter_scores"] = max(worst["inter_scores"],
                                    np.abs(got - oracle_inter(protos)).max())

        sup = rng.normal(1.0, (n, k, c, h, w))
        wts = rng.uniform(0.0, 2.0, (n, c))
        got = apply_to_support(nm.constant(sup), nm.constant(wts)).data
        worst["apply_to_support"] = max(worst["apply_to_support"],
                                        np.abs(got - oracle_apply_support(sup, wts)).max())

        got = apply_to_query(nm.constant(fmap), nm.constant(wts)).data
        worst["apply_to_query"] = max(worst["apply_to_query"],
                                      np.abs(got - oracle_apply_query(fmap, wts)).max())

        got = nm.global_avg_pool(nm.constant(fmap)).data
        worst["pooled"] = max(worst["pooled"], np.abs(got - oracle_pooled(fmap)).max())
    return worst


# ---------------------------------------------------------------------------
# finite-difference gradient check


def micro_episode(seed: int = 0, n_way: int = 2, k_shot: int = 1,
                  n_query: int = 2, image_size: int = 16) -> Episode:
    """A tiny random episode for gradient checking."""
    rng = Rng(seed)
    support = rng.normal(1.0, (n_way, k_shot, 3, image_size, image_size))
    query = rng.normal(1.0, (n_way, n_query, 3, image_size, image_size))
    return Episode(n_way, k_shot, n_query, support, query,
                   tuple(range(n_way)))


def micro_model(seed: int = 0, channels: int = 8, metric: str = "euclidean") -> TdmModel:
    """2-way micro pipeline with every attention module enabled."""
    return TdmModel(Rng(seed).child(1), channels=channels,
                    tdm=TdmConfig(sam=True, qam=True, iam=True),
                    metric=metric)


def gradient_check_model(model: TdmModel, episode: Episode, step: float = 1e-4,
                         rel_tol: float = 1e-3, abs_floor: float = 1e-8) -> dict:
    """Central finite differences of the episode loss for every parameter.

    The forward runs in eval mode (deterministic, no noise); an entry
    passes when |analytic - numeric| <= rel_tol * max(|analytic|,
    |numeric|) or below the absolute floor. An entry that misses at the
    primary step is re-measured at step/10 and step/100 before failing:
    a perturbation of 1e-4 occasionally straddles a ReLU or pooling kink,
    where the difference quotient itself is off while the gradient is
    sound; a genuinely wrong gradient fails at every step size. Returns a
    summary dict and raises AssertionError on the first failing parameter.
    """
    result = model.forward_episode(episode, "eval")
    result.loss.backward()
    named = model.named_parameters()
    analytic = {name: t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for name, t in named}

    def loss_at() -> float:
        with nm.no_grad():
            return float(model.forward_episode(episode, "eval").loss.data)

    def fd_at(flat, i, h) -> float:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_at()
        flat[i] = orig - h
        down = loss_at()
        flat[i] = orig
        return (up - down) / (2.0 * h)

    def rel_of(a, n) -> float:
        denom = max(abs(a), abs(n))
        return abs(a - n) / denom if denom > 0 else 0.0

    checked, refined, worst, worst_name = 0, 0, 0.0, ""
    for name, t in named:
        flat = t.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            a = gflat[i]
            numeric_g = fd_at(flat, i, step)
            rel = rel_of(a, numeric_g)
            if abs(a - numeric_g) > abs_floor and rel > rel_tol:
                refined += 1
                rel = min(rel_of(a, fd_at(flat, i, h))
                          for h in (step / 10, step / 100))
                if rel > rel_tol:
                    raise AssertionError(
                        f"gradient mismatch at {name}[{i}]: analytic {a:.6e} vs "
                        f"finite difference {numeric_g:.6e} (rel {rel:.2e} "
                        f"after step refinement)")
            if abs(a - numeric_g) > abs_floor and rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
            checked += 1
    return {"parameters_checked": checked, "worst_rel_error": worst,
            "worst_entry": worst_name, "kink_refinements": refined}


def micro_gradient_check(seed: int = 0, step: float = 1e-4,
                         rel_tol: float = 1e-3) -> dict:
    """The standard micro-scale check: 2-way 1-shot, 16x16 images, C=8."""
    model = micro_model(seed)
    episode = micro_episode(seed)
    return gradient_check_model(model, episode, step, rel_tol)
