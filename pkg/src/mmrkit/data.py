"""Grouped-dataset containers, CSV ingestion, and validation.

The on-disk format is a headed CSV with one row per observation:
a group identifier column, a response column, and one or more numeric
covariate columns (default header ``group,y,x1,...,xp``).  No intercept
column is added implicitly; include a constant covariate explicitly if
the model needs one.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError


@dataclass(frozen=True)
class GroupSample:
    """One group's observations: n-by-p covariates and length-n responses."""

    group_id: str
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"group {self.group_id!r}: X must be a nonempty 2-D array")
        if y.shape[0] != X.shape[0]:
            raise DataError(
                f"group {self.group_id!r}: {X.shape[0]} covariate rows but {y.shape[0]} responses"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError(f"group {self.group_id!r}: non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class GroupedDataset:
    """An ordered collection of groups sharing one covariate dimension."""

    groups: tuple[GroupSample, ...]

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups:
            raise DataError("a dataset needs at least one group")
        ids = [g.group_id for g in groups]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate group ids: {sorted(ids)}")
        widths = {g.p for g in groups}
        if len(widths) != 1:
            raise DataError(f"groups disagree on covariate dimension: {sorted(widths)}")
        object.__setattr__(self, "groups", groups)

    @property
    def K(self) -> int:
        return len(self.groups)

    @property
    def p(self) -> int:
        return self.groups[0].p

    @property
    def group_ids(self) -> tuple[str, ...]:
        return tuple(g.group_id for g in self.groups)

    def without_group(self, group_id: str) -> "GroupedDataset":
        kept = tuple(g for g in self.groups if g.group_id != group_id)
        if len(kept) == len(self.groups):
            raise DataError(f"no group named {group_id!r}")
        return GroupedDataset(kept)

    def concatenated(self) -> tuple[np.ndarray, np.ndarray]:
        """All rows stacked in group order, as (X, y)."""
        return (
            np.vstack([g.X for g in self.groups]),
            np.concatenate([g.y for g in self.groups]),
        )


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for grouped CSV files.

    ``covariates=None`` takes every non-group, non-response header column
    in file order.
    """

    group: str = "group"
    response: str = "y"
    covariates: tuple[str, ...] | None = None


def load_grouped_csv(path, schema: CsvSchema = CsvSchema()) -> GroupedDataset:
    """Stream a grouped CSV into a GroupedDataset.

    Rows are partitioned by the group column, preserving first-appearance
    order.  Parsing is strict: any cell that does not parse as a float
    raises a DataError naming the 1-based data row and the column.
    """
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        positions = {name: i for i, name in enumerate(header)}
        for required in (schema.group, schema.response):
            if required not in positions:
                raise DataError(f"{path}: missing column {required!r} (header: {header})")
        if schema.covariates is None:
            covariates = [
                h for h in header if h not in (schema.group, schema.response)
            ]
        else:
            covariates = list(schema.covariates)
            for name in covariates:
                if name not in positions:
                    raise DataError(f"{path}: missing covariate column {name!r}")
        if not covariates:
            raise DataError(f"{path}: no covariate columns")
        g_idx = positions[schema.group]
        y_idx = positions[schema.response]
        x_idx = [positions[name] for name in covariates]

        rows_x: dict[str, list[list[float]]] = {}
        rows_y: dict[str, list[float]] = {}
        order: list[str] = []
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {rownum} has {len(row)} cells, expected {len(header)}")
            gid = row[g_idx].strip()
            try:
                yval = float(row[y_idx])
            except ValueError:
                raise DataError(
                    f"{path}: row {rownum}, column {schema.response!r}: "
                    f"non-numeric value {row[y_idx]!r}"
                ) from None
            xvals = []
            for name, idx in zip(covariates, x_idx):
                try:
                    xvals.append(float(row[idx]))
                except ValueError:
                    raise DataError(
                        f"{path}: row {rownum}, column {name!r}: non-numeric value {row[idx]!r}"
                    ) from None
            if gid not in rows_x:
                rows_x[gid] = []
                rows_y[gid] = []
                order.append(gid)
            rows_x[gid].append(xvals)
            rows_y[gid].append(yval)
    if not order:
        raise DataError(f"{path}: no data rows")
    groups = tuple(
        GroupSample(gid, np.array(rows_x[gid], dtype=float), np.array(rows_y[gid], dtype=float))
        for gid in order
    )
    return GroupedDataset(groups)


def save_grouped_csv(dataset: GroupedDataset, path, schema: CsvSchema = CsvSchema()) -> None:
    """Write a dataset back to CSV; floats use shortest round-trip repr."""
    covariates = schema.covariates or tuple(f"x{j + 1}" for j in range(dataset.p))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([schema.group, schema.response, *covariates])
        for group in dataset.groups:
            for xrow, yval in zip(group.X, group.y):
                writer.writerow([group.group_id, repr(float(yval)), *(repr(float(v)) for v in xrow)])


@dataclass(frozen=True)
class GroupReport:
    group_id: str
    n: int
    p: int
    rank: int
    flags: tuple[str, ...]


@dataclass(frozen=True)
class ValidationReport:
    groups: tuple[GroupReport, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return all(not g.flags for g in self.groups)

    def to_json(self) -> str:
        return json.dumps(
            [
                {"group_id": g.group_id, "n": g.n, "p": g.p, "rank": g.rank, "flags": list(g.flags)}
                for g in self.groups
            ],
            indent=2,
        )


def validate(dataset: GroupedDataset) -> ValidationReport:
    """Report per-group size, rank of X'X, and design-deficiency flags.

    Report-only: rank deficiency and insufficient sample sizes are
    flagged, never raised, so callers can decide what is fatal.
    """
    reports = []
    for group in dataset.groups:
        gram = group.X.T @ group.X
        rank = int(np.linalg.matrix_rank(gram))
        flags = []
        if group.n < group.p:
            flags.append("insufficient_sample")
        if rank < group.p:
            flags.append("rank_deficient")
        reports.append(GroupReport(group.group_id, group.n, group.p, rank, tuple(flags)))
    return ValidationReport(tuple(reports))
