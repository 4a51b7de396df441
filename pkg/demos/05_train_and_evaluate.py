"""Train a small model episodically, evaluate with confidence intervals,
save/restore a checkpoint, and sweep the episode geometry.

Uses a reduced configuration so the whole script runs in about a minute.
"""

from tdmfew.data import SynthConfig
from tdmfew.harness import (ExperimentConfig, build_dataset, evaluate,
                            sweep_nk, train)
from tdmfew.model import load_model, save_model

config = ExperimentConfig(
    synth=SynthConfig(n_classes=14, instances_per_class=16, image_size=32,
                      patch_size=5, patch_count_per_class=2, jitter=1,
                      noise_sigma=0.8, seed=0),
    split_fractions=(8 / 14, 3 / 14, 3 / 14),
    channels=16,
    train_episodes=200, eval_episodes=60,
    train_n_way=3, eval_n_way=3, train_n_query=8, eval_n_query=8,
    val_every=50, val_episodes=20,
    run_seed=0,
)

dataset, split = build_dataset(config)
model, log = train(config, dataset, split, log_path="train_log.csv")
print(f"trained {config.train_episodes} episodes; "
      f"first loss {log[0][1]:.3f}, last loss {log[-1][1]:.3f}")

record = evaluate(config, model, dataset, split)
print(f"test accuracy {record.mean_accuracy:.4f} ± {record.ci95:.4f} "
      f"over {record.episode_count} episodes ({record.wall_time_s:.1f}s)")
record.to_json("metrics.json")

save_model("demo_model.tnsr", model)
restored, _ = load_model("demo_model.tnsr")
again = evaluate(config, restored, dataset, split)
print(f"restored checkpoint reproduces evaluation: "
      f"{again.mean_accuracy == record.mean_accuracy}")

grid, notes = sweep_nk(config, model, n_list=(2, 3), k_list=(1, 5),
                       dataset=dataset, split=split, csv_path="sweep.csv")
print("\nN/K sweep (accuracy ± ci95):")
for (n, k), rec in grid.items():
    print(f"  {n}-way {k}-shot: {rec.mean_accuracy:.4f} ± {rec.ci95:.4f}")
print("wrote train_log.csv, metrics.json, sweep.csv, demo_model.tnsr")
