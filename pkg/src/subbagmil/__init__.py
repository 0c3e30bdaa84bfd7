"""Imbalanced multi-class multiple-instance learning with sub-bags, pseudo-bags
and an affinity-based contrastive curriculum."""

__version__ = "0.1.0"

from .bagstore import (DatasetManifest, FeatureBag, SplitSpec, SyntheticConfig, dataset_entropy,
                       generate_synthetic, stratified_split, synthesize_bags)
from .curriculum import CurriculumSchedule, EmbeddingDictionary, TripletConfig, mine_triplets
from .estimator import SubBagMILClassifier
from .metrics import MetricTable, metric_table
from .model import TwinModel, load_checkpoint, save_checkpoint, t1_forward, t2_forward
from .sampling import build_pseudo_bag, expected_balanced_counts, partition_by_distribution
from .trainer import TrainConfig, evaluate, fit, predict_proba

__all__ = [
    "CurriculumSchedule", "DatasetManifest", "EmbeddingDictionary", "FeatureBag", "MetricTable",
    "SplitSpec", "SubBagMILClassifier", "SyntheticConfig", "TrainConfig", "TripletConfig",
    "TwinModel", "build_pseudo_bag", "dataset_entropy", "evaluate", "expected_balanced_counts",
    "fit", "generate_synthetic", "load_checkpoint", "metric_table", "mine_triplets",
    "partition_by_distribution", "predict_proba", "save_checkpoint", "stratified_split",
    "synthesize_bags", "t1_forward", "t2_forward", "__version__",
]
