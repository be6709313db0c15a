"""AUC, cross-entropy and absolute calibration error, overall, per group and worst-case.

An undefined metric (AUC on a single-class sample, ACE when the recalibration
fit is impossible) is represented as NaN and skipped by worst-case reductions.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit
from scipy.stats import rankdata

from subpopdro.errors import DataError, NumericError

PROB_CLIP = 1e-12
METRICS = ("auc", "loss", "ace")
WORST = {"auc": "min", "loss": "max", "ace": "max"}


def _split_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise DataError("scores and labels differ in length")
    return s, y


def auc_u_statistic(scores, labels) -> tuple[float, int, int]:
    """Mann-Whitney U of positives over negatives with half-credit ties.

    Returns (U, n_pos, n_neg). U is a multiple of 1/2 and exact in floating
    point for any realistic sample size.
    """
    s, y = _split_scores(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s, method="average")
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u, n_pos, n_neg


def auc(scores, labels) -> float:
    """Rank-based AUC; NaN when only one class is present."""
    u, n_pos, n_neg = auc_u_statistic(scores, labels)
    if n_pos == 0 or n_neg == 0:
        return math.nan
    return u / (n_pos * n_neg)


def mean_loss(scores, labels) -> float:
    s, y = _split_scores(scores, labels)
    p = np.clip(s, PROB_CLIP, 1.0 - PROB_CLIP)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def _recal_inputs(scores, transform):
    p = np.clip(np.asarray(scores, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    if transform == "logit":
        return p, logit(p)
    if transform == "log":
        return p, np.log(p)
    raise ValueError(f"unknown transform {transform!r}")


def _nll(beta, Z, y):
    eta = Z @ beta
    # log(1 + exp(eta)) - y * eta, stably
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


def fit_recalibration(
    scores, labels, transform: str = "logit", max_iter: int = 100, tol: float = 1e-10
) -> tuple[float, float]:
    """Fit P(y=1) = sigmoid(a + b * logit(score)) by damped Newton-Raphson."""
    _, x = _recal_inputs(scores, transform)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError("scores and labels differ in length")
    if y.size < 10:
        raise DataError(f"recalibration needs at least 10 examples, got {y.size}")
    if y.min() == y.max():
        raise DataError("recalibration needs both classes present")

    Z = np.column_stack([np.ones_like(x), x])
    beta = np.zeros(2)
    f = _nll(beta, Z, y)
    for _ in range(max_iter):
        mu = expit(Z @ beta)
        grad = Z.T @ (mu - y) / y.size
        if np.max(np.abs(grad)) < tol:
            break
        hess = (Z * (mu * (1 - mu))[:, None]).T @ Z / y.size
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(50):
            cand = beta - t * step
            f_new = _nll(cand, Z, y)
            if f_new <= f:
                break
            t *= 0.5
        else:
            if np.max(np.abs(grad)) > 1e-6:
                raise NumericError(f"recalibration line search failed; gradient {grad}")
            break
        if not np.all(np.isfinite(cand)):
            raise NumericError("recalibration diverged")
        beta, f = cand, f_new
    return float(beta[0]), float(beta[1])


def recalibrated(scores, a: float, b: float, transform: str = "logit") -> np.ndarray:
    _, x = _recal_inputs(scores, transform)
    return expit(a + b * x)


def ace(scores, labels, transform: str = "logit") -> float:
    """Mean |recalibrated(p) - p| under a logistic recalibration curve."""
    a, b = fit_recalibration(scores, labels, transform)
    p = np.asarray(scores, dtype=np.float64)
    return float(np.mean(np.abs(recalibrated(p, a, b, transform) - p)))


def _safe_ace(scores, labels, transform):
    try:
        return ace(scores, labels, transform)
    except (DataError, NumericError):
        return math.nan


def _reduce_worst(values: np.ndarray, metric: str) -> float:
    v = values[~np.isnan(values)]
    if v.size == 0:
        return math.nan
    return float(v.min() if WORST[metric] == "min" else v.max())


@dataclass
class GroupMetricTable:
    """Per-group, overall and worst-case metrics.

    `per_group[metric]` is a length-K array; `overall` and `worst_case` map
    metric name to a float. NaN marks an undefined value.
    """

    group_names: tuple[str, ...]
    n: np.ndarray
    per_group: dict[str, np.ndarray]
    overall: dict[str, float]
    worst_case: dict[str, float]

    @property
    def scopes(self) -> list[str]:
        return ["overall", *self.group_names, "worst_case"]

    def value(self, metric: str, scope: str) -> float:
        if scope == "overall":
            return self.overall[metric]
        if scope == "worst_case":
            return self.worst_case[metric]
        return float(self.per_group[metric][self.group_names.index(scope)])

    def as_array(self, metrics=METRICS) -> np.ndarray:
        """Scopes x metrics matrix in `scopes` order."""
        return np.array([[self.value(m, s) for m in metrics] for s in self.scopes])

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

        return {
            "group_names": list(self.group_names),
            "n": [int(v) for v in self.n],
            "per_group": {m: [clean(float(v)) for v in vals] for m, vals in self.per_group.items()},
            "overall": {m: clean(v) for m, v in self.overall.items()},
            "worst_case": {m: clean(v) for m, v in self.worst_case.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupMetricTable":
        def unclean(v):
            return math.nan if v is None else float(v)

        return cls(
            tuple(d["group_names"]),
            np.array(d["n"], dtype=np.int64),
            {m: np.array([unclean(v) for v in vals]) for m, vals in d["per_group"].items()},
            {m: unclean(v) for m, v in d["overall"].items()},
            {m: unclean(v) for m, v in d["worst_case"].items()},
        )

    def to_csv(self) -> str:
        metrics = list(self.overall)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "n", *metrics])
        for scope in self.scopes:
            if scope == "overall":
                n = int(self.n.sum())
            elif scope == "worst_case":
                n = ""
            else:
                n = int(self.n[self.group_names.index(scope)])
            w.writerow([scope, n, *(repr(self.value(m, scope)) for m in metrics)])
        return buf.getvalue()


def group_metric_table(
    scores, labels, groups, group_names=None, metrics=METRICS, transform: str = "logit"
) -> GroupMetricTable:
    s, y = _split_scores(scores, labels)
    g = np.asarray(groups, dtype=np.int64)
    if group_names is None:
        group_names = tuple(str(i) for i in range(int(g.max()) + 1))
    k = len(group_names)
    counts = np.bincount(g, minlength=k)
    if np.any(counts == 0):
        raise DataError("every group needs at least one example")

    funcs = {
        "auc": auc,
        "loss": mean_loss,
        "ace": lambda a, b: _safe_ace(a, b, transform),
    }
    order = np.argsort(g, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    per_group = {m: np.empty(k) for m in metrics}
    for j in range(k):
        sel = order[bounds[j] : bounds[j + 1]]
        sj, yj = s[sel], y[sel]
        for m in metrics:
            per_group[m][j] = funcs[m](sj, yj)
    overall = {m: float(funcs[m](s, y)) for m in metrics}
    worst = {m: _reduce_worst(per_group[m], m) for m in metrics}
    return GroupMetricTable(tuple(group_names), counts, per_group, overall, worst)
