"""Leave-one-group-out evaluation for binary-response grouped data.

Each group is held out in turn as the unseen population.  The robust
methods train on the remaining groups; a within-population baseline
trains on half of the held-out group's rows; everything is scored on
the other half with AuROC and the Brier score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import GroupedDataset, GroupSample
from .exceptions import DataError, MmrkitError
from .families import get_family
from .hiersim import rng_for
from .local_fit import glm_newton
from .solvers import SolverOptions, fit_gdro, fit_mmr, fit_mmv, fit_pooled

LOCO_METHODS = ("within", "pooled", "mmv", "gdro", "mmr")


def auroc(labels, scores) -> float | None:
    """Rank-based AuROC with tie correction; None when one class is absent."""
    labels = np.asarray(labels, dtype=float).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    if labels.shape != scores.shape:
        raise ValueError("labels and scores must have the same length")
    positives = labels > 0.5
    n_pos = int(positives.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def brier(labels, probs) -> float:
    """Mean squared probability error."""
    labels = np.asarray(labels, dtype=float).ravel()
    probs = np.asarray(probs, dtype=float).ravel()
    if labels.shape != probs.shape:
        raise ValueError("labels and probs must have the same length")
    return float(np.mean((probs - labels) ** 2))


@dataclass(frozen=True)
class LocoRow:
    replication: int
    group_id: str
    method: str
    metric: str
    value: float  # NaN marks a missing cell (undefined AuROC, failed fit)


@dataclass(frozen=True)
class LocoReport:
    rows: tuple[LocoRow, ...]
    errors: tuple[str, ...]

    def mean(self, method: str, metric: str) -> float:
        values = np.array(
            [r.value for r in self.rows if r.method == method and r.metric == metric]
        )
        finite = values[np.isfinite(values)]
        return float(np.mean(finite)) if finite.size else float("nan")

    def means(self) -> list[dict]:
        seen, keys = set(), []
        for row in self.rows:
            key = (row.method, row.metric)
            if key not in seen:
                seen.add(key)
                keys.append(key)
        return [
            {"method": m, "metric": metric, "mean": self.mean(m, metric)}
            for m, metric in keys
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["replication", "group_id", "method", "metric", "value"])
            for row in self.rows:
                writer.writerow(
                    [row.replication, row.group_id, row.method, row.metric, repr(row.value)]
                )


def _check_binary(dataset: GroupedDataset) -> None:
    for group in dataset.groups:
        if not np.all(np.isin(group.y, (0.0, 1.0))):
            raise DataError(f"group {group.group_id!r}: responses must be 0/1 for LOCO")


def _train_on_rest(rest: GroupedDataset, methods, family, opts):
    thetas = {}
    failures = {}
    fitters = {
        "pooled": lambda: fit_pooled(rest, family).theta_hat,
        "gdro": lambda: fit_gdro(rest, family, opts).theta_hat,
        "mmr": lambda: fit_mmr(rest, family, opts).theta_hat,
        "mmv": lambda: fit_mmv(rest, family, opts).theta_hat,
    }
    for method in methods:
        if method == "within":
            continue
        try:
            thetas[method] = fitters[method]()
        except MmrkitError as exc:
            failures[method] = str(exc)
    return thetas, failures


def loco_harness(
    dataset: GroupedDataset,
    methods=LOCO_METHODS,
    split_ratio: float = 0.5,
    replications: int = 1,
    seed: int = 0,
    opts: SolverOptions = SolverOptions(),
) -> LocoReport:
    """Leave-one-group-out comparison of the robust methods.

    For every replication and held-out group: split that group's rows
    ``split_ratio`` train to the rest test, fit the within-population
    baseline on the train split, fit all other methods on the remaining
    groups (those fits are split-independent and cached per group), and
    score AuROC/Brier on the test split.  Cells with an undefined AuROC
    (single-class test split) or a failed fit are NaN.
    """
    if dataset.K < 2:
        raise DataError("leave-one-group-out needs at least two groups")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must lie strictly between 0 and 1")
    _check_binary(dataset)
    unknown = set(methods) - set(LOCO_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}; expected from {LOCO_METHODS}")
    family = get_family("logistic")
    rows, errors = [], []
    cache = {}
    for group in dataset.groups:
        rest = dataset.without_group(group.group_id)
        cache[group.group_id] = _train_on_rest(rest, methods, family, opts)
        for method, message in cache[group.group_id][1].items():
            errors.append(f"group {group.group_id!r} {method}: {message}")
    for rep in range(replications):
        for group in dataset.groups:
            rng = rng_for(seed, "loco", rep, group.group_id)
            perm = rng.permutation(group.n)
            n_train = int(round(split_ratio * group.n))
            n_train = min(max(n_train, 1), group.n - 1)
            train_idx, test_idx = perm[:n_train], perm[n_train:]
            X_test, y_test = group.X[test_idx], group.y[test_idx]
            thetas, _ = cache[group.group_id]
            local_thetas = dict(thetas)
            if "within" in methods:
                try:
                    local_thetas["within"] = glm_newton(
                        GroupSample(group.group_id, group.X[train_idx], group.y[train_idx]),
                        family,
                    ).beta_hat
                except MmrkitError as exc:
                    errors.append(f"rep {rep} group {group.group_id!r} within: {exc}")
            for method in methods:
                theta = local_thetas.get(method)
                if theta is None:
                    rows.append(LocoRow(rep, group.group_id, method, "auroc", float("nan")))
                    rows.append(LocoRow(rep, group.group_id, method, "brier", float("nan")))
                    continue
                probs = family.mean(X_test @ theta)
                roc = auroc(y_test, probs)
                rows.append(
                    LocoRow(
                        rep,
                        group.group_id,
                        method,
                        "auroc",
                        float("nan") if roc is None else roc,
                    )
                )
                rows.append(LocoRow(rep, group.group_id, method, "brier", brier(y_test, probs)))
    return LocoReport(rows=tuple(rows), errors=tuple(errors))
