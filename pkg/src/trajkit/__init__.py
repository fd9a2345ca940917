"""Clustering of longitudinal trajectories with penalized-spline centers."""

__version__ = "0.1.0"

from .dataset import TrajectoryDataset, from_arrays, load_csv, write_csv
from .diagnostics import adjusted_rand, align_labels, hcluster_centers, rand_index, rand_replicates, silhouette
from .simgen import GeneratorSpec, Shape, generate, preset
from .spline import SplineModel, fit_penalized, predict, select_lambda
from .trajectories import ClusterParams, ClusterResult, cluster

__all__ = [
    "ClusterParams",
    "ClusterResult",
    "GeneratorSpec",
    "Shape",
    "SplineModel",
    "TrajectoryDataset",
    "adjusted_rand",
    "align_labels",
    "cluster",
    "fit_penalized",
    "from_arrays",
    "generate",
    "hcluster_centers",
    "load_csv",
    "predict",
    "preset",
    "rand_index",
    "rand_replicates",
    "select_lambda",
    "silhouette",
    "write_csv",
]
