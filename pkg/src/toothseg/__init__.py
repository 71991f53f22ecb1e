"""Per-cell tooth segmentation of lower-jaw intraoral scan meshes."""

from .errors import ConfigError, DecimationError, ToothSegError, TrainingDiverged, ValidationError
from .mesh import CellCloud, Representation, TriangleMesh, build_cell_features, select_representation
from .metrics import MetricsReport, compute_report, confusion_matrix, evaluate
from .preprocess import (
    DecimationConfig,
    LabelTransferConfig,
    NormalizationRecord,
    decimate_quadric,
    normalize_cloud,
    preprocess_scan,
    transfer_labels_knn,
)
from .augment import AugmentConfig, generate_augmentations
from .training import Ablation, Checkpoint, ModelConfig, TrainConfig, build_model, evaluate_model, predict, train
from .io import load_scan, load_shard, map_labels, read_mesh, save_shard, write_mesh
from .synthetic import generate_synthetic_jaw

__version__ = "0.1.0"
