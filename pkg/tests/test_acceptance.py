"""Acceptance suite: every exit criterion at its stated tolerance.

Each test prints one PASS/FAIL line (visible with ``pytest -s`` or in the
captured output). Full-scale benchmark numbers from the literature are out
of reach at desk scale by design; the suite instead verifies the math by
oracle comparison, finite differences, exact identities, and a scaled
synthetic experiment whose runtime fits a commodity CPU.

Run:  pytest tests/test_acceptance.py -v -s
"""

import sys
import time

import numpy as np
import pytest

from tdmfew import numeric as nm
from tdmfew import scores as sc
from tdmfew.attention import TdmConfig
from tdmfew.backbone import extract, init_backbone
from tdmfew.checks import micro_episode, micro_gradient_check, oracle_check
from tdmfew.data import SynthConfig, generate_synthetic, sample_episode
from tdmfew.harness import (ExperimentConfig, build_dataset, build_model,
                            compare_methods, evaluate, evaluate_model, train,
                            with_flags)
from tdmfew.model import TdmModel
from tdmfew.numeric import Rng

# Desk-scale experiment: 30 synthetic classes split 20/5/5, 32x32 images,
# 16-channel backbone. Counts follow the harness defaults (2000 train / 600
# eval episodes, 16 queries per class); adam at 2e-3 was calibrated so the
# plain baseline lands in the low 60s on this generator.
EXPERIMENT = ExperimentConfig(
    synth=SynthConfig(n_classes=30, instances_per_class=40, image_size=32,
                      template_strength=1.0, patch_size=5,
                      patch_count_per_class=3, jitter=2, noise_sigma=1.0,
                      seed=0),
    optimizer="adam", learning_rate=2e-3,
    val_every=500, val_episodes=60,
)
SEEDS = (0, 1, 2)


def report(name: str, passed: bool, detail: str = "") -> None:
    line = f"ACCEPTANCE {name}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line, file=sys.__stdout__, flush=True)


def test_oracle_equivalence():
    t0 = time.time()
    worst = oracle_check(trials=50, seed=1)
    elapsed = time.time() - t0
    ok = max(worst.values()) < 1e-10 and elapsed < 5.0
    report("oracle-equivalence", ok,
           f"max abs err {max(worst.values()):.2e}, {elapsed:.2f}s")
    assert max(worst.values()) < 1e-10, worst
    assert elapsed < 5.0


def test_gradient_soundness():
    t0 = time.time()
    summary = micro_gradient_check(seed=0, step=1e-4, rel_tol=1e-3)
    elapsed = time.time() - t0
    ok = elapsed < 60.0
    report("gradient-soundness", ok,
           f"{summary['parameters_checked']} params, worst rel "
           f"{summary['worst_rel_error']:.2e}, {elapsed:.1f}s")
    assert summary["parameters_checked"] > 1000
    assert elapsed < 60.0


def test_identity_and_ablation_invariants():
    # (1) all-ones weights: the weighted head equals the plain head bitwise
    from tdmfew.attention import (apply_to_query, apply_to_support,
                                  compose_task_weights)
    from tdmfew.head import class_probabilities
    rng = Rng(0)
    protos = nm.constant(rng.normal(1.0, (4, 8, 2, 2)))
    query = nm.constant(rng.normal(1.0, (8, 2, 2)))
    ones = nm.constant(np.ones((4, 8)))
    weighted = class_probabilities(
        nm.reshape(apply_to_support(nm.reshape(protos, (4, 1, 8, 2, 2)), ones),
                   (4, 8, 2, 2)),
        apply_to_query(query, ones))
    plain = class_probabilities(protos, nm.stack0([query] * 4))
    ones_ok = (weighted.probabilities == plain.probabilities).all()

    # (2) alpha/beta endpoint exactness
    from tdmfew.attention import FcBlock, fc_forward, sam
    cfg1 = TdmConfig(alpha=1.0)
    bi, bo = FcBlock(8, Rng(1)), FcBlock(8, Rng(2))
    p = nm.constant(rng.normal(1.0, (3, 8, 2, 2)))
    alpha_ok = (sam(p, bi, bo, cfg1, "eval", None).data
                == fc_forward(bi, sc.intra_scores(p), "eval", None, cfg1).data).all()
    w_s = nm.constant(rng.uniform(0, 2, (3, 8)))
    w_q = nm.constant(rng.uniform(0, 2, 8))
    beta_ok = (compose_task_weights(w_s, w_q, 1.0).data == w_s.data).all()
    beta_ok &= all((compose_task_weights(w_s, w_q, 0.0).data[i] == w_q.data).all()
                   for i in range(3))

    # (3) all-off pipeline equals the plain baseline path bitwise
    model_off = TdmModel(Rng(3).child(1), channels=8,
                         tdm=TdmConfig(sam=False, qam=False, iam=False))
    episode = micro_episode(seed=4, n_way=3, k_shot=2, n_query=2)
    from test_model import plain_protonet_reference
    with nm.no_grad():
        off_probs = model_off.forward_episode(episode, "eval").probabilities
        ref_probs = plain_protonet_reference(model_off, episode)
    ablation_ok = (off_probs == ref_probs).all()

    # (4) weight ranges: (0,2) eval, [0,2] train post-clamp
    model = TdmModel(Rng(5).child(1), channels=8,
                     tdm=TdmConfig(sam=True, qam=True, iam=True))
    with nm.no_grad():
        ev = model.forward_episode(episode, "eval", want_weights=True).weights
    tr = model.forward_episode(episode, "train", rng=Rng(6),
                               want_weights=True).weights
    range_ok = all((v > 0).all() and (v < 2).all() for v in ev.values())
    range_ok &= all((v >= 0).all() and (v <= 2).all() for v in tr.values())

    ok = bool(ones_ok and alpha_ok and beta_ok and ablation_ok and range_ok)
    report("identity-ablation-invariants", ok,
           f"ones={bool(ones_ok)} endpoints={bool(alpha_ok and beta_ok)} "
           f"all-off={bool(ablation_ok)} ranges={bool(range_ok)}")
    assert ok


def test_conv4_shape_84_to_64x5x5():
    params = init_backbone(Rng(0))
    with nm.no_grad():
        feats = extract(params, Rng(1).normal(1.0, (1, 3, 84, 84)), "eval", False)
    ok = feats.shape == (1, 64, 5, 5)
    report("conv4-shape", ok, f"84x84 -> {feats.shape[1:]}")
    assert ok


def test_permutation_equivariance_twenty_episodes():
    model = TdmModel(Rng(7).child(1), channels=8,
                     tdm=TdmConfig(sam=True, qam=True, iam=True))
    rng = Rng(8)
    worst_exact = True
    for t in range(20):
        n = int(rng.integers(2, 6))
        episode = micro_episode(seed=100 + t, n_way=n, k_shot=2, n_query=2)
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        with nm.no_grad():
            base = model.forward_episode(episode, "eval").probabilities
            permuted = model.forward_episode(episode.permuted(perm),
                                             "eval").probabilities
        for ci in range(n):
            for qi in range(episode.n_query):
                row = ci * episode.n_query + qi
                new_row = inv[ci] * episode.n_query + qi
                if not (permuted[new_row][inv] == base[row]).all():
                    worst_exact = False
    report("permutation-equivariance", worst_exact, "20 episodes, exact")
    assert worst_exact


def test_chance_level_untrained_model():
    cfg = with_flags(EXPERIMENT, False, False, False)
    dataset, split = build_dataset(cfg)
    model = build_model(cfg)
    rec = evaluate_model(model, dataset, split, "test", 5, 1, 16,
                         episodes=1000, base_seed=cfg.eval_base_seed,
                         keep_per_episode=False)
    ok = abs(rec.mean_accuracy - 0.20) <= 0.03
    report("chance-level", ok, f"mean {rec.mean_accuracy:.4f} over 1000 episodes")
    assert ok


@pytest.fixture(scope="module")
def experiment_results():
    t0 = time.time()
    results = compare_methods(EXPERIMENT, seeds=SEEDS, quiet=False)
    results["_wall_time"] = time.time() - t0
    return results


def test_synthetic_experiment_directional_gains(experiment_results):
    res = experiment_results
    base = res["baseline"]["mean"]
    tdm = res["tdm"]["mean"]
    tdm_iam = res["tdm_iam"]["mean"]
    wall = res["_wall_time"]
    a_ok = base >= 0.60
    b_ok = tdm - base >= 0.02
    c_ok = tdm_iam >= tdm - 0.005
    t_ok = wall < 7200
    ok = a_ok and b_ok and c_ok and t_ok
    report("synthetic-experiment", ok,
           f"baseline {base:.4f} (>=0.60 {a_ok}), +TDM {tdm:.4f} "
           f"(+{(tdm - base) * 100:.2f}pts >=2 {b_ok}), +TDM+IAM {tdm_iam:.4f} "
           f"(>=TDM-0.5pt {c_ok}), wall {wall / 60:.1f} min (<120 {t_ok})")
    assert a_ok, f"baseline accuracy {base:.4f} below 0.60"
    assert b_ok, f"TDM gain {(tdm - base) * 100:.2f} points below 2"
    assert c_ok, f"TDM+IAM {tdm_iam:.4f} more than 0.5 points below TDM {tdm:.4f}"
    assert t_ok, f"experiment took {wall / 60:.1f} minutes"


def test_variance_diagnostic_and_channel_report(tmp_path):
    # exact zero variance on the noise-free dataset
    noise_free = SynthConfig(n_classes=6, instances_per_class=5, image_size=32,
                             patch_size=5, jitter=0, noise_sigma=0.0, seed=3)
    ds0 = generate_synthetic(noise_free)
    rep0 = sc.variance_report({rec.id: rec.instances for rec in ds0.classes})
    zero_ok = (rep0.variances == 0.0).all()

    # channel report on a trained backbone over the noisy test split
    cfg = with_flags(EXPERIMENT, True, True, False)
    cfg = ExperimentConfig(**{**vars(cfg), "train_episodes": 600})
    dataset, split = build_dataset(cfg)
    model, _ = train(cfg, dataset, split)

    # noise-free twin of the same generator: classes differ only by their
    # patches, so between-class spread of pooled features marks the
    # patch-aligned channels
    twin = SynthConfig(**{**vars(cfg.synth), "noise_sigma": 0.0, "jitter": 0})
    ds_twin = generate_synthetic(twin)
    probes = np.stack([rec.instances[0] for rec in ds_twin.classes])
    with nm.no_grad():
        feats = extract(model.backbone, probes, "eval", False)
    sensitivity = feats.data.mean(axis=(2, 3)).std(axis=0)  # (C,)

    inter_sums = np.zeros(cfg.channels)
    intra_sums = np.zeros(cfg.channels)
    n_eps = 40
    for i in range(n_eps):
        ep = sample_episode(dataset, split.test_class_ids, 5, 5, 1, Rng(7000 + i))
        with nm.no_grad():
            f = extract(model.backbone, ep.support_flat(), "eval", False)
            protos = sc.prototype(nm.reshape(f, (5, 5) + f.shape[1:]))
            inter_sums += sc.inter_scores(protos).data.mean(axis=0)
            intra_sums += sc.intra_scores(protos).data.mean(axis=0)

    order = np.argsort(sensitivity)
    half = cfg.channels // 2
    lo, hi = order[:half], order[half:]
    mean_inter_patch = inter_sums[hi].mean() / n_eps
    mean_inter_background = inter_sums[lo].mean() / n_eps

    csv = tmp_path / "channel_report.csv"
    with open(csv, "w") as fh:
        fh.write("channel,patch_sensitivity,mean_inter,mean_intra\n")
        for c in range(cfg.channels):
            fh.write(f"{c},{sensitivity[c]:.9g},{inter_sums[c] / n_eps:.9g},"
                     f"{intra_sums[c] / n_eps:.9g}\n")
    direction = mean_inter_patch > mean_inter_background
    report("variance-diagnostic", bool(zero_ok),
           f"noise-free V==0 {bool(zero_ok)}; patch-channel inter "
           f"{mean_inter_patch:.4f} vs background {mean_inter_background:.4f} "
           f"(higher: {direction}, threshold-free), csv {csv.name}")
    assert zero_ok
    assert csv.exists() and np.isfinite(sensitivity).all()


def test_cosine_path_trains_above_chance():
    from tdmfew.head import class_probabilities
    # scale invariance of the cosine head
    rng = Rng(9)
    protos = nm.constant(rng.normal(1.0, (3, 8, 2, 2)))
    queries = nm.constant(rng.normal(1.0, (3, 8, 2, 2)))
    a = class_probabilities(protos, queries, metric="cosine")
    b = class_probabilities(nm.mul(protos, 41.0), queries, metric="cosine")
    scale_ok = np.abs(a.probabilities - b.probabilities).max() < 1e-9

    cfg = ExperimentConfig(**{**vars(with_flags(EXPERIMENT, True, True, True)),
                              "metric": "cosine",
                              "train_episodes": 800, "eval_episodes": 300,
                              "train_n_way": 2, "eval_n_way": 2,
                              "val_every": 0})
    dataset, split = build_dataset(cfg)
    model, _ = train(cfg, dataset, split)
    rec = evaluate(cfg, model, dataset, split)
    above = rec.mean_accuracy >= 0.70  # chance 0.5 + 20 points
    ok = scale_ok and above
    report("cosine-path", ok,
           f"scale-invariance {scale_ok}, 2-way accuracy {rec.mean_accuracy:.4f}")
    assert scale_ok
    assert above, f"cosine 2-way accuracy {rec.mean_accuracy:.4f} below 0.70"
