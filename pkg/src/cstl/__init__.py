"""Context-sensitive temporal learning for silhouette gait recognition, in numpy."""
from .data import GaitSequence, SyntheticSpec, generate_synthetic, load_dataset, load_sequences
from .estimator import CSTLGait
from .evaluation import EmbeddingRecord, rank_k_eval, scenario_eval
from .model import BASELINE, CSTLNetwork, ModelConfig
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BASELINE", "CSTLGait", "CSTLNetwork", "EmbeddingRecord", "GaitSequence", "ModelConfig",
    "SyntheticSpec", "TrainConfig", "generate_synthetic", "load_checkpoint", "load_dataset",
    "load_sequences", "rank_k_eval", "save_checkpoint", "scenario_eval", "train",
]
