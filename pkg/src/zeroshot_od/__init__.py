"""Zero-shot tabular outlier detection with a prior-fitted router-attention network."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .infer import score
from .model import ModelConfig, count_params, init_params, pfn_forward
from .prior import GmmSpec, LabeledDataset, draw_prior_dataset, sample_gmm_spec, synthesize_dataset
from .train import TrainConfig, pretrain
from .transform import LinearMap, apply_map, sample_linear_map

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "GmmSpec", "LabeledDataset", "LinearMap", "ModelConfig", "TrainConfig",
    "apply_map", "count_params", "draw_prior_dataset", "init_params", "load_checkpoint",
    "pfn_forward", "pretrain", "sample_gmm_spec", "sample_linear_map", "save_checkpoint",
    "score", "synthesize_dataset",
]
