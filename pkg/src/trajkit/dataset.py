"""Long-format trajectory data: loading, validation and per-subject indexing.

Observations are stored flat, grouped by subject and sorted by time within
each subject, so per-subject reductions are ``np.add.reduceat`` calls over
``offsets``.
"""

from __future__ import annotations

import gzip
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class DatasetError(Exception):
    """Raised for unreadable or malformed trajectory input."""


class SchemaError(DatasetError):
    pass


class ParseError(DatasetError):
    pass


class EmptyInputError(DatasetError):
    pass


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    times: np.ndarray
    responses: np.ndarray
    truth_group: int | None = None

    @property
    def n_obs(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class TrajectoryDataset:
    """Subjects in canonical order with their observations laid out contiguously.

    ``offsets`` has one entry per subject plus a final sentinel equal to the
    row count; subject ``i`` owns rows ``offsets[i]:offsets[i+1]``.
    """

    ids: np.ndarray
    offsets: np.ndarray
    times: np.ndarray
    responses: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        if len(self.ids) == 0:
            raise EmptyInputError("dataset has no subjects")
        if len(self.offsets) != len(self.ids) + 1 or self.offsets[-1] != len(self.times):
            raise ValueError("offsets do not match the observation arrays")
        if np.any(np.diff(self.offsets) < 1):
            raise ValueError("every subject needs at least one observation")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("subject ids must be unique")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.responses))):
            raise ValueError("times and responses must be finite")

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_rows(self) -> int:
        return len(self.times)

    @property
    def n_obs(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def has_truth(self) -> bool:
        return self.truth is not None

    @property
    def time_range(self) -> tuple[float, float]:
        return float(self.times.min()), float(self.times.max())

    @property
    def row_subject(self) -> np.ndarray:
        """Subject index of every observation row."""
        return np.repeat(np.arange(self.n_subjects), self.n_obs)

    def subject(self, i: int) -> SubjectRecord:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        truth = None if self.truth is None else int(self.truth[i])
        return SubjectRecord(str(self.ids[i]), self.times[lo:hi], self.responses[lo:hi], truth)

    @property
    def subjects(self) -> list[SubjectRecord]:
        return list(self)

    def __iter__(self) -> Iterator[SubjectRecord]:
        return (self.subject(i) for i in range(self.n_subjects))

    def __len__(self) -> int:
        return self.n_subjects

    def select(self, mask) -> "TrajectoryDataset":
        """Keep the subjects where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool)
        keep_rows = np.repeat(mask, self.n_obs)
        counts = self.n_obs[mask]
        return TrajectoryDataset(
            ids=self.ids[mask],
            offsets=np.concatenate([[0], np.cumsum(counts)]),
            times=self.times[keep_rows],
            responses=self.responses[keep_rows],
            truth=None if self.truth is None else self.truth[mask],
        )

    def to_frame(self) -> pd.DataFrame:
        cols = {
            "id": np.repeat(self.ids, self.n_obs),
            "time": self.times,
            "response": self.responses,
        }
        if self.truth is not None:
            cols["true_group"] = np.repeat(self.truth, self.n_obs)
        return pd.DataFrame(cols)


def _id_sort_key(ids: np.ndarray) -> np.ndarray:
    """Numeric order when every id is an integer, lexicographic otherwise."""
    as_int = pd.to_numeric(pd.Series(ids), errors="coerce")
    if as_int.notna().all() and np.all(as_int == np.floor(as_int)):
        return np.argsort(as_int.to_numpy(), kind="stable")
    return np.argsort(ids.astype(str), kind="stable")


def from_arrays(ids, times, responses, truth=None) -> TrajectoryDataset:
    """Group long-format rows by subject; within a subject rows keep input order on time ties."""
    ids = np.asarray(ids).astype(str)
    times = np.asarray(times, dtype=float)
    responses = np.asarray(responses, dtype=float)
    if len(ids) == 0:
        raise EmptyInputError("no rows")
    if not (len(ids) == len(times) == len(responses)):
        raise ValueError("column lengths differ")

    uniq, inverse = np.unique(ids, return_inverse=True)
    order_of_uniq = _id_sort_key(uniq)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[order_of_uniq] = np.arange(len(uniq))
    subj = rank[inverse]
    rows = np.lexsort((times, subj))
    counts = np.bincount(subj, minlength=len(uniq))

    truth_per_subject = None
    if truth is not None:
        truth = np.asarray(truth)
        truth_per_subject = np.zeros(len(uniq), dtype=np.int64)
        truth_per_subject[subj] = truth.astype(np.int64)
        if np.any(truth_per_subject[subj] != truth):
            raise ValueError("truth label differs between rows of the same subject")

    return TrajectoryDataset(
        ids=uniq[order_of_uniq],
        offsets=np.concatenate([[0], np.cumsum(counts)]),
        times=times[rows],
        responses=responses[rows],
        truth=truth_per_subject,
    )


def _open_text(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def _numeric_column(frame: pd.DataFrame, col: str) -> np.ndarray:
    raw = frame[col]
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        # +2: one for the header line, one for 1-based numbering
        raise ParseError(
            f"column {col!r}, row {i + 2}: cannot parse {raw.iloc[i]!r} as a finite number"
        )
    return values.to_numpy(dtype=float)


def csv_columns(path) -> list[str]:
    """Header names of a (possibly gzipped, comma or tab separated) CSV."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    with _open_text(path) as fh:
        header = fh.readline().rstrip("\r\n")
    sep = "\t" if header.count("\t") > header.count(",") else ","
    return [c.strip().strip('"') for c in header.split(sep)] if header else []


def load_csv(
    path,
    id_col: str = "id",
    time_col: str = "time",
    response_col: str = "response",
    truth_col: str | None = None,
) -> TrajectoryDataset:
    """Read a long-format CSV (comma or tab separated, optionally gzipped)."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    with _open_text(path) as fh:
        header = fh.readline()
        if not header.strip():
            raise EmptyInputError(f"{path}: empty file")
        sep = "\t" if header.count("\t") > header.count(",") else ","
        fh.seek(0)
        try:
            frame = pd.read_csv(fh, sep=sep, dtype=str, keep_default_na=False)
        except pd.errors.ParserError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    frame.columns = [c.strip() for c in frame.columns]
    wanted = [id_col, time_col, response_col] + ([truth_col] if truth_col else [])
    for col in wanted:
        if col not in frame.columns:
            raise SchemaError(f"{path}: missing column {col!r} (have {list(frame.columns)})")
    if len(frame) == 0:
        raise EmptyInputError(f"{path}: no data rows")

    ids = frame[id_col].str.strip().to_numpy()
    blank = np.flatnonzero(ids == "")
    if len(blank):
        raise ParseError(f"column {id_col!r}, row {blank[0] + 2}: blank subject id")
    times = _numeric_column(frame, time_col)
    responses = _numeric_column(frame, response_col)
    truth = None
    if truth_col:
        truth = _numeric_column(frame, truth_col)
        if np.any(truth != np.round(truth)):
            raise ParseError(f"column {truth_col!r} must hold integer labels")
    try:
        ds = from_arrays(ids, times, responses, truth)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    logger.info("loaded %d rows for %d subjects from %s", ds.n_rows, ds.n_subjects, path)
    return ds


def _format_numbers(values: np.ndarray) -> pd.Series:
    if np.all(values == np.round(values)) and np.all(np.abs(values) < 2**53):
        return pd.Series(values.astype(np.int64))
    return pd.Series(values)


def write_csv(ds: TrajectoryDataset, path, gzip_output: bool | None = None) -> None:
    """Write the standard id,time,response[,true_group] file.

    Gzip output is byte-reproducible: the header carries no timestamp or name.
    """
    path = Path(path)
    if gzip_output is None:
        gzip_output = path.suffix == ".gz"
    frame = ds.to_frame()
    frame["time"] = _format_numbers(ds.times)
    frame["response"] = _format_numbers(ds.responses)
    text = frame.to_csv(index=False, lineterminator="\n").encode("utf-8")
    if gzip_output:
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
            gz.write(text)
    else:
        path.write_bytes(text)


def validate_for_clustering(ds: TrajectoryDataset, k: int, maxdf: int) -> list[str]:
    """Advisory checks before clustering; an empty list means no concerns."""
    warnings = []
    if ds.n_subjects < k:
        warnings.append(f"fewer subjects than clusters ({ds.n_subjects} < {k})")
    n_distinct = len(np.unique(ds.times))
    if n_distinct < maxdf + 1:
        warnings.append(
            f"insufficient distinct times for requested basis ({n_distinct} < maxdf + 1 = {maxdf + 1})"
        )
    return warnings


def filter_cohort(ds: TrajectoryDataset, min_pre: int = 1, min_post: int = 3, zero: float = 0.0):
    """Keep subjects with at least ``min_pre`` observations before ``zero`` and ``min_post`` after."""
    starts = ds.offsets[:-1]
    pre = np.add.reduceat((ds.times < zero).astype(np.int64), starts)
    post = np.add.reduceat((ds.times > zero).astype(np.int64), starts)
    return ds.select((pre >= min_pre) & (post >= min_post))
