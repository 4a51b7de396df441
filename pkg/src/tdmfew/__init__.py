"""Task-adaptive channel attention for episodic few-shot classification,
built on a self-contained reverse-mode autodiff substrate."""

from .attention import (FcBlock, TdmConfig, apply_to_query, apply_to_support,
                        compose_task_weights, fc_forward, iam_forward, qam, sam)
from .backbone import BackboneParams, extract, init_backbone
from .data import (ClassSplit, Dataset, Episode, SynthConfig, augment,
                   build_split, generate_synthetic, load_image_folder,
                   sample_episode)
from .harness import (ExperimentConfig, MetricsRecord, ablation_grid,
                      compare_methods, evaluate, evaluate_model, sweep_nk,
                      train)
from .head import class_probabilities, episode_accuracy, episode_loss, pooled
from .model import TdmModel, load_model, save_model
from .numeric import Rng, Tensor, no_grad
from .scores import (inter_scores, intra_scores, mean_spatial, prototype,
                     variance_report)

__version__ = "0.1.0"
