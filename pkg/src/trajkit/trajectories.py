"""k-means over trajectories with penalized-spline cluster centers.

Each iteration fits one spline to the pooled observations of every live
cluster, computes the mean squared distance of every subject to every center
at the subject's own observation times, and moves subjects to their closest
center.  Clusters that empty out, or whose pooled data cannot support a
spline, are dropped; their subjects go to the next closest live center.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import SubjectRecord, TrajectoryDataset
from .spline import (
    LOG10_LAMBDA_RANGE,
    SplineError,
    SplineModel,
    fit_penalized,
    make_basis_spec,
    predict,
    select_lambda,
)

logger = logging.getLogger(__name__)

DROP_EMPTY = "empty"
DROP_SUPPORT = "insufficient-support"
STARTS = ("random", "distant")


class ClusteringError(Exception):
    """Clustering cannot proceed, e.g. every center failed to fit."""


@dataclass(frozen=True)
class ClusterParams:
    k: int
    maxdf: int = 30
    max_iter: int = 20
    conv_pct: float = 0.5
    seed: int = 0
    starts: str = "random"

    def __post_init__(self):
        if self.starts not in STARTS:
            raise ValueError(f"starts must be one of {STARTS}")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0.0 <= self.conv_pct <= 100.0:
            raise ValueError("conv_pct must lie in [0, 100]")
        if self.maxdf < 1:
            raise ValueError("maxdf must be positive")


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    cluster_ids: np.ndarray

    def column(self, label: int) -> np.ndarray:
        return self.values[:, int(np.searchsorted(self.cluster_ids, label))]


@dataclass(frozen=True)
class DropEvent:
    iteration: int
    label: int
    reason: str


@dataclass
class ClusterResult:
    ids: np.ndarray
    assignments: np.ndarray
    centers: dict[int, SplineModel]
    iterations: int
    changes_per_iter: list[float] = field(default_factory=list)
    dropped: list[DropEvent] = field(default_factory=list)
    converged: bool = False
    k: int = 0

    @property
    def labels(self) -> list[int]:
        return sorted(self.centers)

    def assignment_map(self) -> dict[str, int]:
        return {str(i): int(c) for i, c in zip(self.ids, self.assignments)}

    def sizes(self) -> dict[int, int]:
        return {lab: int(np.sum(self.assignments == lab)) for lab in self.labels}


def init_random(ds: TrajectoryDataset, k: int, seed: int) -> np.ndarray:
    """Uniform labels 1..k per subject from numpy's PCG64 generator seeded with ``seed``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(1, k + 1, size=ds.n_subjects)


def init_distant(ds: TrajectoryDataset, k: int, seed: int, maxdf: int = 30) -> np.ndarray:
    """Spread-out start: seed centers on subjects drawn with k-means++ weighting.

    The first seed subject is uniform; each further one is drawn with
    probability proportional to its distance to the closest seed curve so
    far.  A seed curve is the stiffest spline allowed for that one subject,
    essentially its least-squares line, since a single short trajectory
    gives GCV too little to work with.  Subjects then start in the cluster
    of their closest seed curve.
    """
    stiff = 10.0 ** LOG10_LAMBDA_RANGE[1]
    rng = np.random.Generator(np.random.PCG64(seed))
    n = ds.n_subjects
    seeds: dict[int, SplineModel] = {}
    closest = None
    for _ in range(50 * k):
        if len(seeds) == k:
            break
        if closest is None or not np.any(closest > 0):
            i = int(rng.integers(n))
        else:
            i = int(rng.choice(n, p=closest / closest.sum()))
        subj = ds.subject(i)
        try:
            model = fit_penalized(subj.times, subj.responses, make_basis_spec(subj.times, maxdf), stiff)
        except SplineError:
            continue
        label = len(seeds) + 1
        seeds[label] = model
        d = distances(ds, {label: model}).values[:, 0]
        closest = d if closest is None else np.minimum(closest, d)
    if not seeds:
        raise ClusteringError("no subject can seed a center")
    D = distances(ds, seeds)
    return _argmin_labels(D.values, D.cluster_ids, None)


def _map(fn, items, cores: int):
    if cores <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cores) as pool:
        return list(pool.map(fn, items))


def fit_centers(
    ds: TrajectoryDataset,
    assignments: np.ndarray,
    maxdf: int,
    labels=None,
    cores: int = 1,
) -> tuple[dict[int, SplineModel], list[tuple[int, str]]]:
    """Fit a GCV-smoothed spline to each cluster's pooled observations.

    ``labels`` lists the clusters that were live coming into this step; any
    of them that is empty or cannot be fit is returned in the drop list.
    """
    assignments = np.asarray(assignments)
    if labels is None:
        labels = np.unique(assignments)
    labels = [int(x) for x in sorted(labels)]
    row_labels = np.repeat(assignments, ds.n_obs)

    def fit_one(label):
        rows = row_labels == label
        if not rows.any():
            return label, None, DROP_EMPTY
        t, y = ds.times[rows], ds.responses[rows]
        try:
            spec = make_basis_spec(t, maxdf)
            _, model = select_lambda(t, y, spec)
        except SplineError as exc:
            logger.debug("cluster %d not fitted: %s", label, exc)
            return label, None, DROP_SUPPORT
        return label, model, None

    centers, drops = {}, []
    for label, model, reason in _map(fit_one, labels, cores):
        if model is None:
            drops.append((label, reason))
        else:
            centers[label] = model
    if not centers:
        raise ClusteringError("no cluster center could be fitted")
    return centers, drops


def distances(ds: TrajectoryDataset, centers: dict[int, SplineModel], cores: int = 1) -> DistanceMatrix:
    """Mean squared residual of each subject to each center at the subject's own times."""
    if not centers:
        raise ClusteringError("no live centers")
    labels = sorted(centers)
    starts = ds.offsets[:-1]
    n_obs = ds.n_obs

    def column(label):
        resid = ds.responses - predict(centers[label], ds.times)
        return np.add.reduceat(resid * resid, starts) / n_obs

    cols = _map(column, labels, cores)
    return DistanceMatrix(np.column_stack(cols), np.asarray(labels, dtype=np.int64))


def _argmin_labels(values: np.ndarray, cluster_ids: np.ndarray, current: np.ndarray | None):
    best = np.argmin(values, axis=1)
    if current is not None:
        pos = np.searchsorted(cluster_ids, current)
        pos = np.clip(pos, 0, len(cluster_ids) - 1)
        live = cluster_ids[pos] == current
        rows = np.arange(len(values))
        mins = values[rows, best]
        stay = live & (values[rows, pos] == mins)
        best = np.where(stay, pos, best)
    return cluster_ids[best]


def reassign(D: DistanceMatrix, current: np.ndarray) -> tuple[np.ndarray, float]:
    """Move each subject to its closest center.

    Exact ties keep the current cluster when it is among the minima and
    otherwise go to the lowest label.
    """
    current = np.asarray(current)
    new = _argmin_labels(D.values, D.cluster_ids, current)
    switch_pct = 100.0 * float(np.mean(new != current))
    return new, switch_pct


def cluster(ds: TrajectoryDataset, params: ClusterParams, cores: int = 1) -> ClusterResult:
    """Run the k-means loop from a random start until few subjects switch."""
    if params.starts == "distant":
        assignments = init_distant(ds, params.k, params.seed, params.maxdf)
    else:
        assignments = init_random(ds, params.k, params.seed)
    return _iterate(ds, assignments, params, cores)


def _iterate(ds: TrajectoryDataset, assignments: np.ndarray, params: ClusterParams, cores: int) -> ClusterResult:
    live = list(range(1, params.k + 1))
    changes: list[float] = []
    dropped: list[DropEvent] = []
    converged = False
    centers: dict[int, SplineModel] = {}
    iteration = 0

    for iteration in range(1, params.max_iter + 1):
        centers, drops = fit_centers(ds, assignments, params.maxdf, live, cores)
        dropped.extend(DropEvent(iteration, lab, why) for lab, why in drops)
        live = sorted(centers)
        D = distances(ds, centers, cores)
        assignments, pct = reassign(D, assignments)
        _check_closest(D, assignments)
        changes.append(pct)
        logger.info(
            "iteration %d: %d live clusters, %.3f%% switched", iteration, len(live), pct
        )
        if pct <= params.conv_pct:
            converged = True
            break

    if changes and changes[-1] > 0.0:
        centers, assignments = _settle(ds, assignments, centers, params.maxdf, iteration, dropped, cores)

    return ClusterResult(
        ids=ds.ids,
        assignments=assignments,
        centers=centers,
        iterations=iteration,
        changes_per_iter=changes,
        dropped=dropped,
        converged=converged,
        k=params.k,
    )


def _settle(ds, assignments, centers, maxdf, iteration, dropped, cores):
    """Refit centers on the final assignments.

    If a cluster cannot be refit its members move to their closest surviving
    center and the refit repeats, so every reported center comes from exactly
    the subjects assigned to it.
    """
    live = sorted(centers)
    while True:
        centers, drops = fit_centers(ds, assignments, maxdf, live, cores)
        dropped.extend(DropEvent(iteration, lab, why) for lab, why in drops)
        live = sorted(centers)
        orphaned = ~np.isin(assignments, live)
        if not orphaned.any():
            return centers, assignments
        D = distances(ds.select(orphaned), centers, cores)
        assignments = assignments.copy()
        assignments[orphaned] = _argmin_labels(D.values, D.cluster_ids, None)


def _check_closest(D: DistanceMatrix, assignments: np.ndarray) -> None:
    pos = np.searchsorted(D.cluster_ids, assignments)
    own = D.values[np.arange(len(assignments)), pos]
    assert np.all(own <= D.values.min(axis=1)), "a subject is not at its closest center"


def predict_assignment(result: ClusterResult, subject: SubjectRecord) -> int:
    """Closest live center for a subject outside the clustered data (lowest label on ties)."""
    if len(subject.times) == 0:
        raise ValueError("subject has no observations")
    best_label, best = None, np.inf
    for label in result.labels:
        resid = np.asarray(subject.responses, dtype=float) - predict(result.centers[label], subject.times)
        d = float(np.mean(resid * resid))
        if d < best:
            best_label, best = label, d
    return int(best_label)
