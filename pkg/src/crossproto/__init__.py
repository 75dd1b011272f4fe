"""Two-stream prototype-contrastive representation learning.

Two encoders over complementary views of the same samples learn by
predicting each other's equipartitioned prototype assignments under an
alternating schedule, with retrieval / linear-probe / cluster-metric
evaluation of the frozen features.
"""

from .data import (AugmentationSpec, SyntheticSpec, TwoStreamBatch,
                   TwoStreamDataset, augment, generate, load_dataset,
                   load_dataset_csv, save_dataset)
from .evaluation import (ClusterReport, cluster_eval, combine_streams,
                         hungarian, knn_retrieval, linear_probe)
from .losses import (LossConfig, LossOutput, cross_stream_loss, infonce,
                     single_stream_loss)
from .model import (EncoderParams, PrototypeBank, backward, embed, forward,
                    init_encoder, init_prototypes, prototype_scores,
                    renormalize)
from .numerics import l2_normalize_cols, make_rng, matmul, softmax_cols
from .sinkhorn import Assignment, SinkhornConfig, assign, assignment_entropy
from .trainer import (FeatureQueue, ModelConfig, TrainConfig, TrainState,
                      init_state, run_full_pipeline, sgd_step)

__version__ = "0.1.0"
