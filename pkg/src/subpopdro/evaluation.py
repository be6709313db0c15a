"""Stratified percentile bootstrap over the test set.

Absolute intervals pool every (replicate, model) value; relative intervals
difference the model-averaged metric of two methods on shared replicates;
worst-case intervals take the per-replicate extreme over groups.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from subpopdro.errors import ConfigError, DataError
from subpopdro.metrics import METRICS, WORST, group_metric_table

REPORT_COLUMNS = (
    "metric", "scope", "point", "lower", "upper",
    "relative_point", "relative_lower", "relative_upper", "n_missing",
)


@dataclass(frozen=True)
class BootstrapSpec:
    B: int = 1000
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError("bootstrap B must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")


def strata(labels, groups, group_names=None) -> list[np.ndarray]:
    """Member indices of each (outcome, group) stratum, ordered by (group, outcome)."""
    y = np.asarray(labels, dtype=np.int64)
    g = np.asarray(groups, dtype=np.int64)
    k = int(g.max()) + 1 if group_names is None else len(group_names)
    out = []
    for j in range(k):
        for label in (0, 1):
            members = np.flatnonzero((g == j) & (y == label))
            if members.size == 0:
                name = group_names[j] if group_names is not None else j
                raise DataError(f"empty bootstrap stratum: group {name!r}, outcome {label}")
            out.append(members)
    return out


def replicate_indices(spec: BootstrapSpec, members: list[np.ndarray], r: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, r])
    return np.concatenate([m[rng.integers(m.size, size=m.size)] for m in members])


def bootstrap_indices(spec: BootstrapSpec, labels, groups, group_names=None) -> list[np.ndarray]:
    """B resamples, each drawn with replacement within every stratum."""
    members = strata(labels, groups, group_names)
    return [replicate_indices(spec, members, r) for r in range(spec.B)]


@dataclass
class BootstrapDistribution:
    """Metric values per replicate and model: shape (B, n_models, n_scopes, n_metrics)."""

    values: np.ndarray
    scopes: list[str]
    metrics: tuple[str, ...]
    seed: int
    point_tables: list = field(default_factory=list)

    @property
    def B(self) -> int:
        return self.values.shape[0]

    def pooled(self, metric: str, scope: str) -> np.ndarray:
        v = self.values[:, :, self.scopes.index(scope), self.metrics.index(metric)].ravel()
        return v[~np.isnan(v)]

    def n_missing(self, metric: str, scope: str) -> int:
        v = self.values[:, :, self.scopes.index(scope), self.metrics.index(metric)]
        return int(np.isnan(v).sum())

    def group_values(self) -> np.ndarray:
        """(B, n_models, K, n_metrics) per-group slice."""
        return self.values[:, :, 1:-1, :]

    def point(self, metric: str, scope: str) -> float:
        vals = [t.value(metric, scope) for t in self.point_tables]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


def _replicate_block(args):
    spec, members, rs, scores, y, g, names, metrics, transform = args
    out = []
    for r in rs:
        idx = replicate_indices(spec, members, r)
        yr, gr = y[idx], g[idx]
        out.append([
            group_metric_table(s[idx], yr, gr, names, metrics, transform).as_array(metrics)
            for s in scores
        ])
    return out


def bootstrap_distribution_from_scores(
    scores, labels, groups, group_names, spec: BootstrapSpec,
    metrics=METRICS, transform: str = "logit", jobs: int = 1,
) -> BootstrapDistribution:
    """Bootstrap distribution from each model's predicted probabilities on the test set."""
    scores = [np.asarray(s, dtype=np.float64) for s in scores]
    y = np.asarray(labels, dtype=np.int64)
    g = np.asarray(groups, dtype=np.int64)
    names = tuple(group_names)
    metrics = tuple(metrics)
    members = strata(y, g, names)
    point_tables = [group_metric_table(s, y, g, names, metrics, transform) for s in scores]

    blocks = np.array_split(np.arange(spec.B), max(1, min(jobs, spec.B)))
    tasks = [(spec, members, b, scores, y, g, names, metrics, transform) for b in blocks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate_block, tasks))
    else:
        results = [_replicate_block(t) for t in tasks]
    values = np.array([rep for block in results for rep in block])
    return BootstrapDistribution(values, point_tables[0].scopes, metrics, spec.seed, point_tables)


def bootstrap_distribution(
    models, X, labels, groups, group_names, spec: BootstrapSpec,
    metrics=METRICS, transform: str = "logit", jobs: int = 1,
) -> BootstrapDistribution:
    """Score the test set with every model, then bootstrap."""
    scores = [m.predict(X, groups) for m in models]
    return bootstrap_distribution_from_scores(
        scores, labels, groups, group_names, spec, metrics, transform, jobs
    )


def percentile_ci(dist, alpha: float = 0.05) -> tuple[float, float]:
    d = np.asarray(dist, dtype=np.float64).ravel()
    d = d[~np.isnan(d)]
    if d.size == 0:
        return math.nan, math.nan
    lo, hi = np.quantile(d, [alpha / 2, 1 - alpha / 2], method="linear")
    return float(lo), float(hi)


def worst_case_values(group_values: np.ndarray, metric: str, metrics=METRICS) -> np.ndarray:
    """Per (replicate, model) worst case over groups; NaN entries are skipped."""
    v = group_values[..., list(metrics).index(metric)]
    all_nan = np.all(np.isnan(v), axis=-1)
    filled = np.where(np.isnan(v), np.inf if WORST[metric] == "min" else -np.inf, v)
    out = filled.min(axis=-1) if WORST[metric] == "min" else filled.max(axis=-1)
    return np.where(all_nan, np.nan, out)


def worst_case_ci(dist: BootstrapDistribution, metric: str, alpha: float = 0.05) -> tuple[float, float]:
    return percentile_ci(worst_case_values(dist.group_values(), metric, dist.metrics), alpha)


def relative_differences(method: BootstrapDistribution, baseline: BootstrapDistribution) -> np.ndarray:
    """(B, n_scopes, n_metrics) differences of model-averaged metrics, method minus baseline."""
    if method.seed != baseline.seed or method.B != baseline.B:
        raise ConfigError("relative intervals need both methods bootstrapped with the same seed and B")
    if method.scopes != baseline.scopes or method.metrics != baseline.metrics:
        raise ConfigError("relative intervals need matching scopes and metrics")
    with warnings.catch_warnings():
        # all-NaN slices (single-class groups in every model) stay NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(method.values, axis=1) - np.nanmean(baseline.values, axis=1)


def relative_ci(method: BootstrapDistribution, baseline: BootstrapDistribution, alpha: float = 0.05) -> dict:
    """{(metric, scope): (lower, upper)} for method minus baseline."""
    diffs = relative_differences(method, baseline)
    return {
        (m, s): percentile_ci(diffs[:, si, mi], alpha)
        for si, s in enumerate(method.scopes)
        for mi, m in enumerate(method.metrics)
    }


@dataclass
class MetricReport:
    rows: list[dict]
    alpha: float
    B: int
    seed: int

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "alpha": self.alpha,
            "B": self.B,
            "seed": self.seed,
            "rows": [{k: clean(v) for k, v in row.items()} for row in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.rows:
            out = []
            for col in REPORT_COLUMNS:
                v = row.get(col)
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    out.append("")
                elif isinstance(v, float):
                    out.append(repr(v))
                else:
                    out.append(v)
            w.writerow(out)
        return buf.getvalue()


def metric_report(
    dist: BootstrapDistribution, alpha: float = 0.05, baseline: BootstrapDistribution | None = None
) -> MetricReport:
    rel = relative_ci(dist, baseline, alpha) if baseline is not None else {}
    rows = []
    for m in dist.metrics:
        for s in dist.scopes:
            lo, hi = percentile_ci(dist.pooled(m, s), alpha)
            row = {
                "metric": m, "scope": s, "point": dist.point(m, s), "lower": lo, "upper": hi,
                "relative_point": None, "relative_lower": None, "relative_upper": None,
                "n_missing": dist.n_missing(m, s),
            }
            if baseline is not None:
                row["relative_point"] = row["point"] - baseline.point(m, s)
                row["relative_lower"], row["relative_upper"] = rel[(m, s)]
            rows.append(row)
    return MetricReport(rows, alpha, dist.B, dist.seed)
