"""Episodic training, evaluation with confidence intervals, and the
ablation / N-K sweep drivers.

Every run is fully determined by its :class:`ExperimentConfig` and seed:
episode sampling, parameter init, and regularization noise each draw from
their own child stream of the run seed, and evaluation episode i is
sampled with seed ``base + i`` so results merge deterministically across
workers.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numeric as nm
from .attention import TdmConfig
from .data import (ClassSplit, DataError, Dataset, SynthConfig, augment,
                   build_split, generate_synthetic, load_image_folder,
                   sample_episode)
from .model import TdmModel, save_model
from .numeric import Rng


class DivergenceError(RuntimeError):
    """Training loss went non-finite; carries the offending episode seed."""

    def __init__(self, episode_index: int, episode_seed):
        super().__init__(f"training diverged at episode {episode_index} "
                         f"(episode seed {episode_seed})")
        self.episode_index = episode_index
        self.episode_seed = episode_seed


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one training/evaluation run."""

    # dataset source
    dataset_kind: str = "synthetic"          # "synthetic" | "folder"
    folder_path: str = ""
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(
        n_classes=30, instances_per_class=40, image_size=32,
        template_strength=1.0, patch_size=5, patch_count_per_class=3,
        jitter=2, noise_sigma=0.25, seed=0))
    # class split
    split_fractions: tuple = (20 / 30, 5 / 30, 5 / 30)
    split_seed: int = 0
    # model
    channels: int = 16
    metric: str = "euclidean"
    temperature: float = 10.0
    distance_on: str = "pooled"
    iam_after: tuple = (1, 2)
    tdm: TdmConfig = field(default_factory=TdmConfig)
    # optimizer
    optimizer: str = "sgd"                   # "sgd" | "adam"
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # episode counts and geometry
    train_episodes: int = 2000
    eval_episodes: int = 600
    train_n_way: int = 5
    train_k_shot: int = 1
    train_n_query: int = 16
    eval_n_way: int = 5
    eval_k_shot: int = 1
    eval_n_query: int = 16
    val_every: int = 100
    val_episodes: int = 100
    augment_flags: tuple = ()
    reuse_five_shot_checkpoint: bool = False  # train at K=5 even for 1-shot eval
    # bookkeeping
    run_seed: int = 0
    eval_base_seed: int = 10_000_000
    output_dir: str = ""

    def __post_init__(self):
        for name in ("train_episodes", "eval_episodes", "train_n_way",
                     "train_k_shot", "train_n_query", "eval_n_way",
                     "eval_k_shot", "eval_n_query", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class MetricsRecord:
    """Accuracy summary over evaluation episodes."""

    mean_accuracy: float
    ci95: float                  # 1.96 * sample std / sqrt(episodes)
    episode_count: int
    per_episode: list | None
    wall_time_s: float
    degenerate_ci: bool = False  # a single episode has no spread estimate

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"mean_accuracy": self.mean_accuracy, "ci95": self.ci95,
                       "episode_count": self.episode_count,
                       "per_episode": self.per_episode,
                       "wall_time_s": self.wall_time_s,
                       "degenerate_ci": self.degenerate_ci}, fh, indent=1)


def summarize_accuracies(accs, wall_time_s: float = 0.0,
                         keep_per_episode: bool = True) -> MetricsRecord:
    accs = list(map(float, accs))
    n = len(accs)
    if n == 1:
        return MetricsRecord(accs[0], 0.0, 1, accs if keep_per_episode else None,
                             wall_time_s, degenerate_ci=True)
    arr = np.asarray(accs)
    ci = 1.96 * arr.std(ddof=1) / np.sqrt(n)
    return MetricsRecord(float(arr.mean()), float(ci), n,
                         accs if keep_per_episode else None, wall_time_s)


def build_dataset(config: ExperimentConfig) -> tuple[Dataset, ClassSplit]:
    if config.dataset_kind == "synthetic":
        dataset = generate_synthetic(config.synth)
    elif config.dataset_kind == "folder":
        dataset = load_image_folder(config.folder_path)
    else:
        raise ValueError(f"unknown dataset_kind {config.dataset_kind!r}")
    split = build_split(dataset, config.split_fractions, config.split_seed)
    return dataset, split


def build_model(config: ExperimentConfig) -> TdmModel:
    return TdmModel(Rng(config.run_seed).child(1), channels=config.channels,
                    tdm=config.tdm, metric=config.metric,
                    temperature=config.temperature,
                    distance_on=config.distance_on, iam_after=config.iam_after)


class Sgd:
    """SGD with classic momentum and decoupled-from-graph weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with the usual bias correction; weight decay added to gradients."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m += (1 - self.b1) * (g - m)
            v += (1 - self.b2) * (g * g - v)
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(config: ExperimentConfig, params):
    if config.optimizer == "sgd":
        return Sgd(params, config.learning_rate, config.momentum,
                   config.weight_decay)
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate,
                    weight_decay=config.weight_decay)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def _augment_episode(episode, rng, flags):
    if not flags:
        return episode
    sup = np.stack([[augment(img, rng, flags) for img in group]
                    for group in episode.support])
    qry = np.stack([[augment(img, rng, flags) for img in group]
                    for group in episode.query])
    return replace(episode, support=sup, query=qry)


def train(config: ExperimentConfig, dataset: Dataset | None = None,
          split: ClassSplit | None = None, log_path=None,
          checkpoint_path=None, quiet: bool = True):
    """Episodic training with periodic validation; keeps the best-val model.

    Returns (model, log_rows); the model carries the best-validation
    parameters. ``log_rows`` are (episode, loss, train_acc, val_acc)
    tuples with val_acc empty between validations, also written as CSV
    when ``log_path`` is given.
    """
    if dataset is None or split is None:
        dataset, split = build_dataset(config)
    model = build_model(config)
    optimizer = make_optimizer(config, model.parameters())
    root = Rng(config.run_seed)
    k_shot = 5 if config.reuse_five_shot_checkpoint else config.train_k_shot

    log_rows = []
    best_val, best_state = -1.0, None
    val_part = "val" if split.val_class_ids else "train"
    for e in range(config.train_episodes):
        ep_rng = root.child(2, e)
        episode = sample_episode(dataset, split.train_class_ids,
                                 config.train_n_way, k_shot,
                                 config.train_n_query, ep_rng)
        episode = _augment_episode(episode, root.child(5, e), config.augment_flags)
        result = model.forward_episode(episode, "train", rng=root.child(3, e))
        loss = float(result.loss.data)
        if not np.isfinite(loss):
            if log_path:
                _write_log(log_path, log_rows)
            raise DivergenceError(e, (config.run_seed, 2, e))
        result.loss.backward()
        optimizer.step()
        optimizer.zero_grad()

        val_acc = ""
        if config.val_every and (e + 1) % config.val_every == 0:
            rec = evaluate_model(model, dataset, split, part=val_part,
                                 n_way=min(config.eval_n_way, max(2, len(split.part(val_part)))),
                                 k_shot=config.eval_k_shot,
                                 n_query=config.eval_n_query,
                                 episodes=config.val_episodes,
                                 base_seed=config.eval_base_seed + 500_000 + e,
                                 keep_per_episode=False)
            val_acc = rec.mean_accuracy
            if val_acc > best_val:
                best_val = val_acc
                best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            if not quiet:
                print(f"episode {e + 1}: loss {loss:.4f} val {val_acc:.4f}", flush=True)
        log_rows.append((e, loss, result.accuracy, val_acc))

    if best_state is not None:
        model.load_state_arrays(best_state)
    if log_path:
        _write_log(log_path, log_rows)
    if checkpoint_path:
        save_model(checkpoint_path, model, extra_meta={"best_val": best_val})
    return model, log_rows


def _write_log(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("episode,loss,train_acc,val_acc\n")
        for e, loss, acc, val in rows:
            fh.write(f"{e},{loss:.9g},{acc:.6g},{val if val == '' else f'{val:.6g}'}\n")


def _eval_workers() -> int:
    env = os.environ.get("TDM_THREADS")
    return max(1, int(env)) if env else 1


def evaluate_model(model: TdmModel, dataset: Dataset, split: ClassSplit,
                   part: str, n_way: int, k_shot: int, n_query: int,
                   episodes: int, base_seed: int,
                   keep_per_episode: bool = True,
                   workers: int | None = None) -> MetricsRecord:
    """Mean accuracy with a 95% CI over freshly sampled eval episodes.

    Episode i is sampled with seed ``base_seed + i``; the class pool is
    asserted disjoint from the training classes for non-train parts.
    """
    pool = split.part(part)
    if len(pool) < n_way:
        raise DataError(f"{part} split has {len(pool)} classes, need {n_way}")
    train_ids = set(split.train_class_ids)

    def run_one(i: int) -> float:
        episode = sample_episode(dataset, pool, n_way, k_shot, n_query,
                                 Rng(base_seed + i))
        if part != "train":
            overlap = train_ids.intersection(episode.class_ids)
            if overlap:
                raise DataError(f"evaluation episode touched train classes {overlap}")
        with nm.no_grad():
            return model.forward_episode(episode, "eval").accuracy

    t0 = time.time()
    n_workers = workers if workers is not None else _eval_workers()
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool_exec:
            accs = list(pool_exec.map(run_one, range(episodes)))
    else:
        accs = [run_one(i) for i in range(episodes)]
    return summarize_accuracies(accs, time.time() - t0, keep_per_episode)


def evaluate(config: ExperimentConfig, model: TdmModel,
             dataset: Dataset | None = None, split: ClassSplit | None = None,
             part: str = "test") -> MetricsRecord:
    if dataset is None or split is None:
        dataset, split = build_dataset(config)
    return evaluate_model(model, dataset, split, part, config.eval_n_way,
                          config.eval_k_shot, config.eval_n_query,
                          config.eval_episodes, config.eval_base_seed)


def dump_episode_weights(config: ExperimentConfig, model: TdmModel,
                         dataset: Dataset, split: ClassSplit, csv_path,
                         episodes: int = 1, part: str = "test") -> None:
    """Write the attention weight vectors of a few eval episodes as CSV.

    Uses the first query's task weights per episode; a no-op when both
    support and query attention are disabled.
    """
    from .attention import dump_weights_csv
    from . import scores as sc
    from .attention import fc_forward
    from .backbone import extract

    if not (model.tdm.sam or model.tdm.qam):
        return
    for i in range(episodes):
        ep = sample_episode(dataset, split.part(part), config.eval_n_way,
                            config.eval_k_shot, config.eval_n_query,
                            Rng(config.eval_base_seed + 900_000 + i))
        with nm.no_grad():
            result = model.forward_episode(ep, "eval", want_weights=True)
            feats = extract(model.backbone, ep.support_flat(), "eval",
                            iam_enabled=model.tdm.iam, tdm_config=model.tdm)
            n, k = ep.n_way, ep.k_shot
            protos = sc.prototype(nm.reshape(feats, (n, k) + feats.shape[1:]))
            if model.tdm.sam:
                w_intra = fc_forward(model.b_intra, sc.intra_scores(protos),
                                     "eval", None, model.tdm).data
                w_inter = fc_forward(model.b_inter, sc.inter_scores(protos),
                                     "eval", None, model.tdm).data
            else:
                w_intra = w_inter = np.ones((n, model.channels))
        w = result.weights
        w_support = w["w_support"] if w["w_support"] is not None else np.ones_like(w_intra)
        w_query = w["w_query"][0] if w["w_query"] is not None else np.ones(model.channels)
        w_task = w["w_task"][0] if w["w_task"].ndim == 3 else w["w_task"]
        dump_weights_csv(csv_path, i, w_intra, w_inter, w_support, w_query, w_task)


# ---------------------------------------------------------------------------
# drivers

ABLATION_ORDER = (
    ("none", (False, False, False)),
    ("S", (True, False, False)),
    ("Q", (False, True, False)),
    ("I", (False, False, True)),
    ("SQ", (True, True, False)),
    ("SI", (True, False, True)),
    ("QI", (False, True, True)),
    ("SQI", (True, True, True)),
)


@dataclass
class AblationRow:
    label: str
    sam: bool
    qam: bool
    iam: bool
    metrics: MetricsRecord


def with_flags(config: ExperimentConfig, sam: bool, qam: bool, iam: bool) -> ExperimentConfig:
    return replace(config, tdm=replace(config.tdm, sam=sam, qam=qam, iam=iam))


def ablation_grid(config: ExperimentConfig, csv_path=None) -> list[AblationRow]:
    """Train and evaluate the full attention-switch cube from one seed."""
    dataset, split = build_dataset(config)
    rows = []
    for label, (s, q, i) in ABLATION_ORDER:
        cfg = with_flags(config, s, q, i)
        model, _ = train(cfg, dataset, split)
        rec = evaluate(cfg, model, dataset, split)
        rows.append(AblationRow(label, s, q, i, rec))
    if csv_path:
        with open(csv_path, "w") as fh:
            fh.write("label,sam,qam,iam,mean_accuracy,ci95,episodes\n")
            for r in rows:
                fh.write(f"{r.label},{int(r.sam)},{int(r.qam)},{int(r.iam)},"
                         f"{r.metrics.mean_accuracy:.6g},{r.metrics.ci95:.6g},"
                         f"{r.metrics.episode_count}\n")
    return rows


def sweep_nk(config: ExperimentConfig, model: TdmModel, n_list, k_list,
             dataset: Dataset | None = None, split: ClassSplit | None = None,
             csv_path=None):
    """Evaluate one trained model across an N x K grid on the test split.

    Cells needing more classes than the split holds are skipped with a
    note. Returns ({(n, k): MetricsRecord | None}, notes).
    """
    if dataset is None or split is None:
        dataset, split = build_dataset(config)
    grid, notes = {}, []
    for n in n_list:
        for k in k_list:
            if n > len(split.test_class_ids):
                grid[(n, k)] = None
                notes.append(f"skipped N={n}: test split has only "
                             f"{len(split.test_class_ids)} classes")
                continue
            grid[(n, k)] = evaluate_model(
                model, dataset, split, "test", n, k, config.eval_n_query,
                config.eval_episodes, config.eval_base_seed,
                keep_per_episode=False)
    if csv_path:
        with open(csv_path, "w") as fh:
            fh.write("n_way,k_shot,mean_accuracy,ci95,episodes\n")
            for (n, k), rec in grid.items():
                if rec is None:
                    fh.write(f"{n},{k},,,skipped\n")
                else:
                    fh.write(f"{n},{k},{rec.mean_accuracy:.6g},{rec.ci95:.6g},"
                             f"{rec.episode_count}\n")
    return grid, notes


METHOD_FLAGS = {
    "baseline": (False, False, False),
    "tdm": (True, True, False),
    "tdm_iam": (True, True, True),
}


def compare_methods(config: ExperimentConfig, seeds=(0, 1, 2),
                    methods=("baseline", "tdm", "tdm_iam"), quiet: bool = True):
    """Train/evaluate each method over several run seeds on one dataset.

    Returns {method: {"per_seed": [MetricsRecord...], "mean": float}}.
    """
    dataset, split = build_dataset(config)
    results = {}
    for method in methods:
        s, q, i = METHOD_FLAGS[method]
        per_seed = []
        for seed in seeds:
            cfg = replace(with_flags(config, s, q, i), run_seed=seed)
            model, _ = train(cfg, dataset, split)
            rec = evaluate(cfg, model, dataset, split)
            per_seed.append(rec)
            if not quiet:
                print(f"{method} seed {seed}: {rec.mean_accuracy:.4f} "
                      f"± {rec.ci95:.4f}", flush=True)
        results[method] = {
            "per_seed": per_seed,
            "mean": float(np.mean([r.mean_accuracy for r in per_seed])),
        }
    return results
