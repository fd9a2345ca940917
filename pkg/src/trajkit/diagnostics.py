"""Choosing the number of clusters and comparing clusterings.

Pair-counting agreement (Rand and adjusted Rand), replicate ARI tables over
several k, silhouettes against center distances, complete-linkage trees of
center curves, and greedy label matching between two sets of centers.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import pandas as pd
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import cdist, pdist

from .dataset import TrajectoryDataset
from .spline import SplineModel, predict
from .trajectories import ClusterParams, ClusterResult, cluster, distances

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def _pair_counts(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"partitions differ in length ({a.shape} vs {b.shape})")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two items to count pairs")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def c2(x):
        x = np.asarray(x, dtype=np.int64)
        return int(np.sum(x * (x - 1) // 2))

    return c2(table), c2(table.sum(axis=1)), c2(table.sum(axis=0)), n * (n - 1) // 2


def rand_index(a, b) -> float:
    """Fraction of item pairs that both partitions treat alike (together or apart)."""
    both, in_a, in_b, total = _pair_counts(a, b)
    apart_both = total - in_a - in_b + both
    return (both + apart_both) / total


def adjusted_rand(a, b) -> float:
    """Hubert-Arabie adjusted Rand index; 1.0 when both partitions are a single cluster."""
    both, in_a, in_b, total = _pair_counts(a, b)
    expected = in_a * in_b / total
    top = 0.5 * (in_a + in_b)
    if top == expected:
        return 1.0
    return (both - expected) / (top - expected)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def replicate_seed(master: int, k: int, replicate: int) -> int:
    """Seed for one (k, replicate) run, chained through splitmix64."""
    s = splitmix64(master & MASK64)
    s = splitmix64(s ^ (k & MASK64))
    return splitmix64(s ^ (replicate & MASK64))


@dataclass
class RandTable:
    """Pairwise ARIs among replicate clusterings, ordered by k then replicate."""

    runs: list[tuple[int, int]]
    partitions: list[np.ndarray]
    pairs: pd.DataFrame
    truth: pd.DataFrame | None = None
    results: list[ClusterResult] = field(default_factory=list, repr=False)

    def matrix(self) -> np.ndarray:
        m = np.eye(len(self.runs))
        index = {run: i for i, run in enumerate(self.runs)}
        for row in self.pairs.itertuples(index=False):
            i = index[(row.k_a, row.rep_a)]
            j = index[(row.k_b, row.rep_b)]
            m[i, j] = m[j, i] = row.ari
        return m

    def within_k_mean(self) -> dict[int, float]:
        same = self.pairs[self.pairs.k_a == self.pairs.k_b]
        return {int(k): float(g.ari.mean()) for k, g in same.groupby("k_a")}


def rand_replicates(
    ds: TrajectoryDataset,
    ks,
    replicates: int,
    params: ClusterParams,
    seed: int,
    cores: int = 1,
) -> RandTable:
    """Cluster every (k, replicate) combination and tabulate all pairwise ARIs.

    ``params`` supplies maxdf and the stopping rule; k and seed are replaced
    per run.
    """
    if replicates < 2:
        raise ValueError("need at least two replicates")
    runs = [(int(k), r) for k in ks for r in range(1, replicates + 1)]

    def run_one(run):
        k, r = run
        p = dataclasses.replace(params, k=k, seed=replicate_seed(seed, k, r))
        try:
            return cluster(ds, p)
        except Exception as exc:
            raise RuntimeError(f"clustering failed for k={k}, replicate={r}: {exc}") from exc

    if cores > 1:
        with ThreadPoolExecutor(max_workers=cores) as pool:
            results = list(pool.map(run_one, runs))
    else:
        results = [run_one(run) for run in runs]
    partitions = [res.assignments for res in results]

    rows = []
    for (i, run_a), (j, run_b) in combinations(enumerate(runs), 2):
        rows.append((*run_a, *run_b, adjusted_rand(partitions[i], partitions[j])))
    pairs = pd.DataFrame(rows, columns=["k_a", "rep_a", "k_b", "rep_b", "ari"])

    truth = None
    if ds.has_truth:
        truth = pd.DataFrame(
            [(k, r, adjusted_rand(p, ds.truth)) for (k, r), p in zip(runs, partitions)],
            columns=["k", "replicate", "ari"],
        )
    return RandTable(runs, partitions, pairs, truth, results)


def silhouette(result: ClusterResult, ds: TrajectoryDataset) -> pd.DataFrame:
    """Silhouette of each subject using root-mean-squared distance to the centers.

    ``a`` is the distance to the subject's own center and ``b`` to the
    nearest other one.  Rows are sorted by cluster and then by decreasing
    silhouette, ready for a bar plot.
    """
    if len(result.centers) < 2:
        raise ValueError("silhouette undefined for a single cluster")
    D = distances(ds, result.centers)
    return silhouette_from_distances(np.sqrt(D.values), D.cluster_ids, result.assignments, ds.ids)


def silhouette_from_distances(dist, cluster_ids, assignments, ids=None) -> pd.DataFrame:
    dist = np.asarray(dist, dtype=float)
    cluster_ids = np.asarray(cluster_ids)
    assignments = np.asarray(assignments)
    if dist.shape[1] < 2:
        raise ValueError("silhouette undefined for a single cluster")
    n = len(dist)
    rows = np.arange(n)
    own_pos = np.searchsorted(cluster_ids, assignments)
    a = dist[rows, own_pos]
    others = dist.copy()
    others[rows, own_pos] = np.inf
    nb_pos = np.argmin(others, axis=1)
    b = others[rows, nb_pos]
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(denom > 0, (b - a) / denom, 0.0)
    frame = pd.DataFrame(
        {
            "id": ids if ids is not None else rows + 1,
            "cluster": assignments.astype(np.int64),
            "neighbor": cluster_ids[nb_pos].astype(np.int64),
            "silhouette": s,
        }
    )
    frame = frame.sort_values(["cluster", "silhouette"], ascending=[True, False], kind="stable")
    return frame.reset_index(drop=True)


def center_grid(centers: dict[int, SplineModel], grid_points: int = 100, time_range=None) -> np.ndarray:
    if time_range is None:
        lo = min(m.spec.boundary[0] for m in centers.values())
        hi = max(m.spec.boundary[1] for m in centers.values())
    else:
        lo, hi = time_range
    return np.linspace(lo, hi, grid_points)


def center_curves(centers: dict[int, SplineModel], grid: np.ndarray) -> np.ndarray:
    """Rows are centers in label order, columns grid points."""
    return np.vstack([predict(centers[lab], grid) for lab in sorted(centers)])


@dataclass
class DendrogramTree:
    """Agglomerative merge history in scipy's node numbering.

    Leaves are ``0..K-1`` (in ``labels`` order); the merge at step ``s``
    creates node ``K + s``.
    """

    merges: np.ndarray
    labels: list[int]
    curves: np.ndarray | None = None
    grid: np.ndarray | None = None

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "step": np.arange(1, len(self.merges) + 1),
                "node_a": self.merges[:, 0].astype(np.int64),
                "node_b": self.merges[:, 1].astype(np.int64),
                "height": self.merges[:, 2],
            }
        )

    def cut(self, n_clades: int) -> dict[int, int]:
        """Clade number (1-based) of every leaf label when the tree is cut into ``n_clades``."""
        z = np.column_stack([self.merges, self._sizes()])
        clades = fcluster(z, t=n_clades, criterion="maxclust")
        return {lab: int(c) for lab, c in zip(self.labels, clades)}

    def _sizes(self) -> np.ndarray:
        k = len(self.labels)
        size = np.ones(k + len(self.merges))
        for s, (a, b, _) in enumerate(self.merges):
            size[k + s] = size[int(a)] + size[int(b)]
        return size[k:]


def hcluster_curves(curves: np.ndarray, labels) -> DendrogramTree:
    """Complete-linkage clustering of curve vectors under Euclidean distance."""
    curves = np.asarray(curves, dtype=float)
    if len(curves) < 2:
        raise ValueError("need at least two centers")
    z = linkage(pdist(curves), method="complete")
    return DendrogramTree(merges=z[:, :3].copy(), labels=[int(x) for x in labels], curves=curves)


def hcluster_centers(
    centers: dict[int, SplineModel], grid_points: int = 100, time_range=None
) -> DendrogramTree:
    """Evaluate each center on an even grid and cluster the curves (complete linkage)."""
    if len(centers) < 2:
        raise ValueError("need at least two centers")
    grid = center_grid(centers, grid_points, time_range)
    tree = hcluster_curves(center_curves(centers, grid), sorted(centers))
    tree.grid = grid
    return tree


@dataclass
class Alignment:
    mapping: dict[int, int]
    distances: dict[int, float]
    unmapped_a: list[int]
    unmapped_b: list[int]


def align_curves(labels_a, curves_a, labels_b, curves_b) -> Alignment:
    """Greedy matching of two curve sets by Manhattan distance.

    Repeatedly pairs the globally closest remaining (a, b) curves and
    removes both, scanning the distance matrix column by column so ties
    resolve the same way as R's ``which.min``.
    """
    labels_a = [int(x) for x in labels_a]
    labels_b = [int(x) for x in labels_b]
    m = cdist(np.asarray(curves_a, float), np.asarray(curves_b, float), metric="cityblock")
    mapping, dist = {}, {}
    for _ in range(min(len(labels_a), len(labels_b))):
        flat = int(np.argmin(m.T))
        j, i = divmod(flat, m.shape[0])
        mapping[labels_a[i]] = labels_b[j]
        dist[labels_a[i]] = float(m[i, j])
        m[i, :] = np.inf
        m[:, j] = np.inf
    used_b = set(mapping.values())
    return Alignment(
        mapping=mapping,
        distances=dist,
        unmapped_a=[x for x in labels_a if x not in mapping],
        unmapped_b=[x for x in labels_b if x not in used_b],
    )


def align_labels(centers_a, centers_b, grid_points: int = 100, time_range=None) -> Alignment:
    """Map labels of ``centers_a`` onto ``centers_b`` using curves on a shared grid."""
    if time_range is None:
        merged = {**{("a", k): v for k, v in centers_a.items()}, **{("b", k): v for k, v in centers_b.items()}}
        lo = min(m.spec.boundary[0] for m in merged.values())
        hi = max(m.spec.boundary[1] for m in merged.values())
        time_range = (lo, hi)
    grid = np.linspace(time_range[0], time_range[1], grid_points)
    return align_curves(
        sorted(centers_a), center_curves(centers_a, grid), sorted(centers_b), center_curves(centers_b, grid)
    )
