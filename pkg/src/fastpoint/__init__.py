"""Hierarchical point-cloud networks built on a small NumPy autodiff engine."""

from .data import LabeledDataset, load_dataset, normalize_unit_sphere, save_dataset
from .geometry import farthest_point_sample, interpolate_features, knn_search, pairwise_sq_dist
from .models import Classifier, ClassifierConfig, Segmenter, SegmenterConfig, param_count
from .tensor import Parameter, Tape, Tensor, precision

__version__ = "0.1.0"

__all__ = [
    "Classifier", "ClassifierConfig", "LabeledDataset", "Parameter", "Segmenter", "SegmenterConfig", "Tape",
    "Tensor", "farthest_point_sample", "interpolate_features", "knn_search", "load_dataset",
    "normalize_unit_sphere", "pairwise_sq_dist", "param_count", "precision", "save_dataset",
]
