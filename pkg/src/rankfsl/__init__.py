"""Kendall rank-correlation similarity for few-shot prototype classification."""

from .metrics import (MetricKind, MetricSpec, cosine_similarity, kendall_tau_fast,
                      kendall_tau_naive, neg_euclidean, sample_pairs, sampled_kendall,
                      similarity, similarity_matrix, smooth_kendall, smooth_kendall_grad)
from .classifier import (ClassifierConfig, Posterior, PrototypeSet, class_posteriors,
                         compute_prototypes, posterior_loss_backward, predict)
from .data import (DataError, LabeledFeatureSet, SyntheticSpec, channel_stats,
                   generate_synthetic, load_features, save_features, split_classes)
from .episode import (EpisodeConfig, EpisodeTask, EvalReport, episode_loss,
                      episode_loss_backward, evaluate_tasks, sample_episode)
from .model import (LinearEmbedder, NumericalAbort, TrainConfig, TrainLog, embed,
                    embed_backward, pretrain_ce, train_meta)
from .ablation import MaskKind, MaskSpec, apply_mask, masked_eval, sweep_alpha, sweep_pair_budget

__version__ = "0.1.0"
