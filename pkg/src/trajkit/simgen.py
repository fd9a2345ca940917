"""Synthetic blood-pressure-like cohorts with known cluster membership.

Each true cluster follows a piecewise curve: a flat pre-treatment level,
an exponential drop right after time zero, then a linear and quadratic
post-treatment trend.  Subjects get an over-dispersed number of visits at
integer days, with at least one visit before time zero and three after.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import TrajectoryDataset, from_arrays


@dataclass(frozen=True)
class Shape:
    """Center curve of one true cluster.

    ``slope`` and ``curvature`` are per year of post-zero time.
    """

    level: float
    drop: float = 0.0
    tau: float = 30.0
    slope: float = 0.0
    curvature: float = 0.0

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        post = np.maximum(t, 0.0)
        years = post / 365.0
        decline = self.drop * (1.0 - np.exp(-post / self.tau))
        return self.level - decline + self.slope * years + self.curvature * years**2


@dataclass(frozen=True)
class GeneratorSpec:
    n_subjects: int
    cluster_weights: tuple[float, ...]
    shapes: tuple[Shape, ...]
    time_range: tuple[int, int] = (-365, 730)
    min_pre: int = 1
    min_post: int = 3
    mean_obs: float = 16.92
    dispersion: float = 4.0
    noise_sd: float = 10.0
    seed: int = 0

    def __post_init__(self):
        w = np.asarray(self.cluster_weights, dtype=float)
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be at least 1")
        if len(w) != len(self.shapes) or len(w) == 0:
            raise ValueError("need one weight per shape")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("cluster weights must be nonnegative and sum to 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        lo, hi = self.time_range
        if not lo < 0 < hi:
            raise ValueError("time range must straddle zero")
        if self.mean_obs < self.min_pre + self.min_post:
            raise ValueError("mean_obs is below the observation minima")
        if self.dispersion <= 0:
            raise ValueError("dispersion must be positive")

    @property
    def n_clusters(self) -> int:
        return len(self.shapes)

    def centers(self, t) -> np.ndarray:
        """Matrix of true center values, clusters x times."""
        return np.vstack([s(t) for s in self.shapes])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = [asdict(s) for s in self.shapes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        d["shapes"] = tuple(Shape(**s) for s in d["shapes"])
        d["cluster_weights"] = tuple(d["cluster_weights"])
        d["time_range"] = tuple(d["time_range"])
        return cls(**d)


def _obs_counts(rng, spec: GeneratorSpec, n: int) -> np.ndarray:
    """Shifted negative binomial with mean ``mean_obs``."""
    floor = spec.min_pre + spec.min_post
    extra_mean = spec.mean_obs - floor
    if extra_mean <= 0:
        return np.full(n, floor)
    r = spec.dispersion
    p = r / (r + extra_mean)
    return floor + rng.negative_binomial(r, p, size=n)


def generate(spec: GeneratorSpec) -> TrajectoryDataset:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = spec.n_subjects
    groups = rng.choice(spec.n_clusters, size=n, p=np.asarray(spec.cluster_weights)) + 1
    counts = _obs_counts(rng, spec, n)
    lo, hi = spec.time_range
    pre_share = -lo / (hi - lo)

    # pre-zero visits: at least min_pre, the rest binomial on the window share
    free = counts - spec.min_pre - spec.min_post
    n_pre = spec.min_pre + rng.binomial(free, pre_share)
    n_post = counts - n_pre

    subj_pre = np.repeat(np.arange(n), n_pre)
    subj_post = np.repeat(np.arange(n), n_post)
    t_pre = rng.integers(lo, 0, size=len(subj_pre))
    t_post = rng.integers(1, hi + 1, size=len(subj_post))
    subj = np.concatenate([subj_pre, subj_post])
    times = np.concatenate([t_pre, t_post]).astype(float)

    g = groups[subj]
    mean = np.empty(len(times))
    for c, shape in enumerate(spec.shapes, start=1):
        rows = g == c
        mean[rows] = shape(times[rows])
    responses = mean + rng.normal(0.0, 1.0, size=len(times)) * spec.noise_sd

    width = len(str(n))
    ids = np.char.zfill(np.arange(1, n + 1).astype(str), width)[subj]
    return from_arrays(ids, times, responses, truth=groups[subj])


_BP5_SHAPES = (
    Shape(level=140.0, drop=21.0, tau=30.0, slope=-1.0),
    Shape(level=169.0, drop=35.0, tau=30.0, slope=-10.0),
    Shape(level=167.0, drop=16.0, tau=30.0, slope=13.0),
    Shape(level=181.0, drop=37.0, tau=45.0, slope=0.0),
    Shape(level=141.0, drop=4.0, tau=30.0, slope=3.0),
)


def preset(name: str, n_subjects: int | None = None, seed: int = 0) -> GeneratorSpec:
    """Named generator settings: ``bp5``, ``clean2`` or ``clean5``."""
    if name == "bp5":
        return GeneratorSpec(
            n_subjects=n_subjects or 10_000,
            cluster_weights=(0.30, 0.25, 0.20, 0.15, 0.10),
            shapes=_BP5_SHAPES,
            noise_sd=23.0,
            seed=seed,
        )
    if name in ("clean2", "clean5"):
        k = 2 if name == "clean2" else 5
        # flat levels 25 apart: separation is 25 noise sd
        shapes = tuple(Shape(level=125.0 + 25.0 * i) for i in range(k))
        return GeneratorSpec(
            n_subjects=n_subjects or 1_000,
            cluster_weights=tuple([1.0 / k] * k),
            shapes=shapes,
            noise_sd=1.0,
            seed=seed,
        )
    raise ValueError(f"unknown preset {name!r}; choose bp5, clean2 or clean5")
