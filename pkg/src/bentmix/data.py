"""Longitudinal dataset ingestion, validation and reduced views."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

__all__ = [
    "DataError",
    "Profile",
    "LongitudinalDataset",
    "ReducedView",
    "load_csv",
    "write_csv",
    "reduce_for_dic",
    "has_equal_spacing",
]

# Minimum usable sizes for model fitting: five coefficients per individual
# need a handful of observations, and pooling needs more than one profile.
MIN_OBS_PER_PROFILE = 4
MIN_PROFILES = 2


class DataError(ValueError):
    """Raised when an input dataset violates the ingestion contract."""


@dataclass(frozen=True)
class Profile:
    """One individual's observation series, sorted by strictly increasing time."""

    id: str
    times: np.ndarray
    responses: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.responses, dtype=float)
        if t.ndim != 1 or y.ndim != 1 or t.shape != y.shape:
            raise DataError(f"profile {self.id!r}: times/responses must be equal-length 1-d")
        if t.shape[0] == 0:
            raise DataError(f"profile {self.id!r}: empty")
        if np.any(np.diff(t) <= 0):
            raise DataError(f"profile {self.id!r}: times must be strictly increasing")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(y)):
            raise DataError(f"profile {self.id!r}: non-finite values")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return int(self.times.shape[0])


@dataclass(frozen=True)
class LongitudinalDataset:
    """Immutable collection of profiles; safe to share across chains."""

    profiles: tuple

    def __post_init__(self) -> None:
        profiles = tuple(self.profiles)
        if len(profiles) == 0:
            raise DataError("no profiles")
        ids = [p.id for p in profiles]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate profile ids")
        object.__setattr__(self, "profiles", profiles)

    @property
    def m(self) -> int:
        return len(self.profiles)

    @property
    def ids(self) -> List[str]:
        return [p.id for p in self.profiles]

    @property
    def n(self) -> List[int]:
        return [p.n for p in self.profiles]

    def profile_pairs(self):
        """(times, responses) pairs in profile order."""
        return [(p.times, p.responses) for p in self.profiles]

    def time_range(self) -> tuple:
        lo = min(p.times[0] for p in self.profiles)
        hi = max(p.times[-1] for p in self.profiles)
        return float(lo), float(hi)


def load_csv(path) -> LongitudinalDataset:
    """Read a long-format CSV with header ``id,time,y`` into a dataset.

    Rows belonging to one id must appear with strictly increasing time;
    duplicated or decreasing times, and non-numeric fields, are rejected with
    the offending row number.  Profiles may interleave and have unequal
    lengths.  Fitting requires at least ``MIN_PROFILES`` profiles of at least
    ``MIN_OBS_PER_PROFILE`` observations each.
    """
    rows_by_id: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("no profiles: file is empty") from None
        header = [h.strip().lower() for h in header]
        if header[:3] != ["id", "time", "y"]:
            raise DataError(f"expected header id,time,y; got {','.join(header)}")
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise DataError(f"row {rownum}: expected 3 columns, got {len(row)}")
            pid = row[0].strip()
            try:
                t = float(row[1])
            except ValueError:
                raise DataError(f"row {rownum}: non-numeric time {row[1]!r}") from None
            try:
                y = float(row[2])
            except ValueError:
                raise DataError(f"row {rownum}: non-numeric y {row[2]!r}") from None
            bucket = rows_by_id.setdefault(pid, [])
            if bucket:
                last_t = bucket[-1][0]
                if t == last_t:
                    raise DataError(f"row {rownum}: duplicate (id, time) = ({pid}, {t})")
                if t < last_t:
                    raise DataError(
                        f"row {rownum}: non-monotone time for id {pid} ({t} after {last_t})"
                    )
            bucket.append((t, y))
    if not rows_by_id:
        raise DataError("no profiles: file has a header but no data rows")

    profiles = []
    for pid, rows in rows_by_id.items():
        arr = np.array(rows, dtype=float)
        if arr.shape[0] < MIN_OBS_PER_PROFILE:
            raise DataError(
                f"profile {pid!r} has {arr.shape[0]} observations; "
                f"need at least {MIN_OBS_PER_PROFILE}"
            )
        profiles.append(Profile(id=pid, times=arr[:, 0], responses=arr[:, 1]))
    if len(profiles) < MIN_PROFILES:
        raise DataError(f"need at least {MIN_PROFILES} profiles, got {len(profiles)}")
    return LongitudinalDataset(profiles=tuple(profiles))


def write_csv(dataset: LongitudinalDataset, path) -> None:
    """Write a dataset in the long CSV format accepted by :func:`load_csv`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "time", "y"])
        for prof in dataset.profiles:
            for t, y in zip(prof.times, prof.responses):
                writer.writerow([prof.id, repr(float(t)), repr(float(y))])


@dataclass(frozen=True)
class ReducedView:
    """Dataset with the first ``offset`` observations of each profile dropped.

    Used to make deviance comparisons across AR orders share one response
    block: dropping ``p_max - p`` leading observations and conditioning on the
    next ``p`` leaves observations ``p_max+1..n_i`` random for every ``p``.
    """

    source: LongitudinalDataset
    offset: int
    p: int
    dataset: LongitudinalDataset = field(repr=False, default=None)

    def random_index_sets(self):
        """Per-profile (id, times) of the likelihood-contributing observations."""
        return [
            (prof.id, tuple(prof.times[self.p :])) for prof in self.dataset.profiles
        ]


def reduce_for_dic(dataset: LongitudinalDataset, p_max: int, p: int) -> ReducedView:
    """Build the reduced view for fitting AR(``p``) comparably up to ``p_max``."""
    if not (0 <= p <= p_max):
        raise DataError(f"need 0 <= p <= p_max, got p={p}, p_max={p_max}")
    for prof in dataset.profiles:
        if prof.n <= p_max:
            raise DataError(
                f"profile {prof.id!r} has {prof.n} observations; "
                f"reduction for p_max={p_max} needs more"
            )
    offset = p_max - p
    if offset == 0:
        reduced = dataset
    else:
        reduced = LongitudinalDataset(
            profiles=tuple(
                Profile(id=pr.id, times=pr.times[offset:], responses=pr.responses[offset:])
                for pr in dataset.profiles
            )
        )
    return ReducedView(source=dataset, offset=offset, p=p, dataset=reduced)


def has_equal_spacing(dataset: LongitudinalDataset, rtol: float = 1e-9) -> bool:
    """True when every profile's time grid is evenly spaced (to ``rtol``)."""
    for prof in dataset.profiles:
        steps = np.diff(prof.times)
        if steps.size == 0:
            continue
        ref = steps[0]
        if np.any(np.abs(steps - ref) > rtol * max(abs(ref), 1e-300)):
            return False
    return True


def warn_if_unequal_spacing(dataset: LongitudinalDataset, p: int) -> None:
    """AR(p>0) noise presumes an even time grid; warn when it is not."""
    if p > 0 and not has_equal_spacing(dataset):
        warnings.warn(
            "AR order > 0 assumes equally spaced observation times; "
            "this dataset is unevenly spaced",
            stacklevel=2,
        )
