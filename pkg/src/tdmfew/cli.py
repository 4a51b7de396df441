"""Command-line entry points.

Subcommands: synth-data, train, eval, ablate, sweep, grad-check,
oracle-check. Runs are configured by an INI-style file whose
section.key entries mirror :class:`ExperimentConfig`; any key can be
overridden on the command line as ``--section.key value``. The TDM_SEED
environment variable overrides the configured run seed, and TDM_THREADS
caps evaluation workers.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

from .attention import TdmConfig
from .checks import micro_gradient_check, oracle_check
from .data import SynthConfig, generate_synthetic, save_dataset
from .harness import (ExperimentConfig, ablation_grid, build_dataset,
                      evaluate, sweep_nk, train)
from .model import load_model


class ConfigError(ValueError):
    """Bad configuration file, key, or value."""


class UsageError(ValueError):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _strs(text: str) -> tuple:
    return tuple(t.strip() for t in text.split(",") if t.strip())


# section.key -> (target, field, converter); targets are the synth/tdm
# sub-configs or the experiment config itself.
CONFIG_KEYS = {
    "dataset.kind": ("exp", "dataset_kind", str),
    "dataset.folder": ("exp", "folder_path", str),
    "dataset.n_classes": ("synth", "n_classes", int),
    "dataset.instances_per_class": ("synth", "instances_per_class", int),
    "dataset.image_size": ("synth", "image_size", int),
    "dataset.template_strength": ("synth", "template_strength", float),
    "dataset.patch_size": ("synth", "patch_size", int),
    "dataset.patch_count_per_class": ("synth", "patch_count_per_class", int),
    "dataset.jitter": ("synth", "jitter", int),
    "dataset.noise_sigma": ("synth", "noise_sigma", float),
    "dataset.seed": ("synth", "seed", int),
    "split.fractions": ("exp", "split_fractions", _floats),
    "split.seed": ("exp", "split_seed", int),
    "model.channels": ("exp", "channels", int),
    "model.metric": ("exp", "metric", str),
    "model.temperature": ("exp", "temperature", float),
    "model.distance_on": ("exp", "distance_on", str),
    "model.iam_after": ("exp", "iam_after", _ints),
    "tdm.alpha": ("tdm", "alpha", float),
    "tdm.beta": ("tdm", "beta", float),
    "tdm.noise_half_width": ("tdm", "noise_half_width", float),
    "tdm.sam": ("tdm", "sam", _bool),
    "tdm.qam": ("tdm", "qam", _bool),
    "tdm.iam": ("tdm", "iam", _bool),
    "train.optimizer": ("exp", "optimizer", str),
    "train.learning_rate": ("exp", "learning_rate", float),
    "train.momentum": ("exp", "momentum", float),
    "train.weight_decay": ("exp", "weight_decay", float),
    "train.episodes": ("exp", "train_episodes", int),
    "train.n_way": ("exp", "train_n_way", int),
    "train.k_shot": ("exp", "train_k_shot", int),
    "train.n_query": ("exp", "train_n_query", int),
    "train.val_every": ("exp", "val_every", int),
    "train.val_episodes": ("exp", "val_episodes", int),
    "train.augment": ("exp", "augment_flags", _strs),
    "train.reuse_five_shot_checkpoint": ("exp", "reuse_five_shot_checkpoint", _bool),
    "eval.episodes": ("exp", "eval_episodes", int),
    "eval.n_way": ("exp", "eval_n_way", int),
    "eval.k_shot": ("exp", "eval_k_shot", int),
    "eval.n_query": ("exp", "eval_n_query", int),
    "eval.base_seed": ("exp", "eval_base_seed", int),
    "run.seed": ("exp", "run_seed", int),
    "run.output_dir": ("exp", "output_dir", str),
}


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    """Config file plus overrides plus the TDM_SEED environment override."""
    flat = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, value in parser.items(section):
                flat[f"{section}.{key}"] = value
    flat.update(overrides)

    buckets = {"exp": {}, "synth": {}, "tdm": {}}
    for key, raw in flat.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        target, fieldname, conv = CONFIG_KEYS[key]
        try:
            buckets[target][fieldname] = conv(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc

    try:
        default = ExperimentConfig()
        synth_kwargs = {**vars(default.synth), **buckets["synth"]}
        tdm_kwargs = {**vars(default.tdm), **buckets["tdm"]}
        config = ExperimentConfig(synth=SynthConfig(**synth_kwargs),
                                  tdm=TdmConfig(**tdm_kwargs), **buckets["exp"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    env_seed = os.environ.get("TDM_SEED")
    if env_seed is not None:
        try:
            config.run_seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"TDM_SEED must be an integer, got {env_seed!r}") from exc
    return config


def _split_overrides(rest: list) -> dict:
    overrides = {}
    i = 0
    while i < len(rest):
        token = rest[i]
        if not token.startswith("--") or "." not in token:
            raise UsageError(f"unknown flag {token!r}; overrides look like "
                             f"--section.key value")
        key = token[2:]
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        if i + 1 >= len(rest):
            raise UsageError(f"missing value for {token}")
        overrides[key] = rest[i + 1]
        i += 2
    return overrides


def _outdir(config: ExperimentConfig) -> str:
    out = config.output_dir or "tdm_runs"
    os.makedirs(out, exist_ok=True)
    return out


def _cmd_synth_data(args, config: ExperimentConfig) -> int:
    dataset = generate_synthetic(config.synth)
    out = args.out or os.path.join(_outdir(config), "dataset.tnsr")
    save_dataset(out, dataset, config.synth)
    print(f"wrote {len(dataset)} classes x {config.synth.instances_per_class} "
          f"instances to {out}")
    return 0


def _cmd_train(args, config: ExperimentConfig) -> int:
    out = _outdir(config)
    dataset, split = build_dataset(config)
    model, _ = train(config, dataset, split,
                     log_path=os.path.join(out, "log.csv"),
                     checkpoint_path=os.path.join(out, "model.tnsr"),
                     quiet=args.quiet)
    rec = evaluate(config, model, dataset, split)
    rec.to_json(os.path.join(out, "metrics.json"))
    print(f"test accuracy {rec.mean_accuracy:.4f} ± {rec.ci95:.4f} "
          f"over {rec.episode_count} episodes")
    return 0


def _cmd_eval(args, config: ExperimentConfig) -> int:
    model, _ = load_model(args.checkpoint)
    dataset, split = build_dataset(config)
    rec = evaluate(config, model, dataset, split)
    rec.to_json(os.path.join(_outdir(config), "metrics.json"))
    if args.dump_weights:
        from .harness import dump_episode_weights
        dump_episode_weights(config, model, dataset, split, args.dump_weights)
        print(f"wrote weight vectors to {args.dump_weights}")
    print(f"test accuracy {rec.mean_accuracy:.4f} ± {rec.ci95:.4f} "
          f"over {rec.episode_count} episodes")
    return 0


def _cmd_ablate(args, config: ExperimentConfig) -> int:
    rows = ablation_grid(config, csv_path=os.path.join(_outdir(config), "ablation.csv"))
    for r in rows:
        print(f"{r.label:>4}: {r.metrics.mean_accuracy:.4f} ± {r.metrics.ci95:.4f}")
    return 0


def _cmd_sweep(args, config: ExperimentConfig) -> int:
    model, _ = load_model(args.checkpoint)
    dataset, split = build_dataset(config)
    grid, notes = sweep_nk(config, model, args.n_list, args.k_list, dataset, split,
                           csv_path=os.path.join(_outdir(config), "sweep.csv"))
    for (n, k), rec in grid.items():
        if rec is None:
            print(f"N={n} K={k}: skipped")
        else:
            print(f"N={n} K={k}: {rec.mean_accuracy:.4f} ± {rec.ci95:.4f}")
    for note in notes:
        print(note)
    return 0


def _cmd_grad_check(args, config: ExperimentConfig) -> int:
    if args.model != "micro":
        raise UsageError(f"unknown grad-check model {args.model!r} (only 'micro')")
    summary = micro_gradient_check(seed=args.seed, step=args.step, rel_tol=args.tol)
    print(f"checked {summary['parameters_checked']} parameters, worst relative "
          f"error {summary['worst_rel_error']:.3e} at {summary['worst_entry'] or 'n/a'}")
    return 0


def _cmd_oracle_check(args, config: ExperimentConfig) -> int:
    worst = oracle_check(trials=args.trials, seed=args.seed)
    failed = {k: v for k, v in worst.items() if v >= 1e-10}
    for name, err in sorted(worst.items()):
        print(f"{name:>18}: max abs error {err:.3e}")
    if failed:
        raise AssertionError(f"oracle mismatch beyond 1e-10: {failed}")
    return 0


def main(argv=None) -> int:
    parser = _Parser(prog="tdmfew", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")

    p = sub.add_parser("synth-data", help="generate and save the synthetic dataset")
    common(p)
    p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="train one model and evaluate it")
    common(p)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dump-weights", default=None,
                   help="also write attention weight vectors to this CSV")

    p = sub.add_parser("ablate", help="run the 8-row attention-switch grid")
    common(p)

    p = sub.add_parser("sweep", help="evaluate a checkpoint over an N/K grid")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-list", type=_ints, default=(2, 5))
    p.add_argument("--k-list", type=_ints, default=(1, 5))

    p = sub.add_parser("grad-check", help="finite-difference check of the pipeline")
    common(p)
    p.add_argument("--model", default="micro")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("oracle-check", help="loop-oracle comparison of the score math")
    common(p)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=1)

    commands = {
        "synth-data": _cmd_synth_data, "train": _cmd_train, "eval": _cmd_eval,
        "ablate": _cmd_ablate, "sweep": _cmd_sweep, "grad-check": _cmd_grad_check,
        "oracle-check": _cmd_oracle_check,
    }

    try:
        args, rest = parser.parse_known_args(argv)
        overrides = _split_overrides(rest)
        config = load_config(getattr(args, "config", None), overrides)
        return commands[args.command](args, config)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
