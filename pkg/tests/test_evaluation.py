import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subpopdro.errors import ConfigError, DataError
from subpopdro.evaluation import (
    REPORT_COLUMNS,
    BootstrapSpec,
    bootstrap_distribution_from_scores,
    bootstrap_indices,
    metric_report,
    percentile_ci,
    relative_ci,
    relative_differences,
    strata,
    worst_case_ci,
    worst_case_values,
)
from subpopdro.metrics import group_metric_table


def _data(n=300, k=3, seed=0):
    rng = np.random.default_rng(seed)
    g = np.arange(n) % k
    y = rng.integers(0, 2, n)
    y[:2 * k] = np.repeat([0, 1], k)
    s = np.clip(0.5 + 0.3 * (y - 0.5) + rng.normal(0, 0.2, n), 0.01, 0.99)
    return s, y, g, tuple(f"g{i}" for i in range(k))


def test_percentile_examples():
    assert percentile_ci(np.arange(1, 101)) == pytest.approx((3.475, 97.525), abs=1e-12)
    assert percentile_ci([0, 1]) == pytest.approx((0.025, 0.975), abs=1e-12)
    assert percentile_ci([0.3] * 10) == (0.3, 0.3)
    assert all(math.isnan(v) for v in percentile_ci([math.nan]))


def test_strata_preserved_in_every_replicate():
    s, y, g, names = _data()
    members = strata(y, g, names)
    sizes = [m.size for m in members]
    for idx in bootstrap_indices(BootstrapSpec(B=100, seed=3), y, g, names):
        assert [np.sum((g[idx] == j) & (y[idx] == c)) for j in range(3) for c in (0, 1)] == sizes


def test_empty_stratum_names_group():
    y = np.array([0, 1, 1, 1])
    g = np.array([0, 0, 1, 1])
    with pytest.raises(DataError, match="b"):
        strata(y, g, ("a", "b"))


def test_distinct_fraction_near_632():
    y = np.r_[np.zeros(5000, int), np.ones(5000, int)]
    g = np.zeros(10_000, int)
    idx = bootstrap_indices(BootstrapSpec(B=20), y, g, ("all",))
    frac = np.mean([np.unique(i).size / i.size for i in idx])
    assert abs(frac - (1 - math.exp(-1))) < 0.005


def test_replicates_reproducible_and_independent_of_jobs():
    s, y, g, names = _data()
    spec = BootstrapSpec(B=12, seed=7)
    a = bootstrap_distribution_from_scores([s, s ** 2], y, g, names, spec)
    b = bootstrap_distribution_from_scores([s, s ** 2], y, g, names, spec, jobs=2)
    assert a.values.shape == (12, 2, 5, 3)
    np.testing.assert_array_equal(a.values, b.values)


def test_per_replicate_values_match_naive_recomputation():
    s, y, g, names = _data(seed=1)
    spec = BootstrapSpec(B=8, seed=2)
    dist = bootstrap_distribution_from_scores([s], y, g, names, spec)
    for r, idx in enumerate(bootstrap_indices(spec, y, g, names)):
        t = group_metric_table(s[idx], y[idx], g[idx], names)
        np.testing.assert_array_equal(dist.values[r, 0], t.as_array())
        wc = worst_case_values(dist.group_values(), "loss", dist.metrics)[r, 0]
        assert wc == max(t.per_group["loss"])
        assert worst_case_values(dist.group_values(), "auc", dist.metrics)[r, 0] == min(t.per_group["auc"])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_worst_case_values_naive(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0, 1, (4, 2, 3, 3))
    v[rng.random(v.shape) < 0.2] = np.nan
    for mi, metric in enumerate(("auc", "loss", "ace")):
        got = worst_case_values(v, metric)
        for r in range(4):
            for m in range(2):
                row = [x for x in v[r, m, :, mi] if not math.isnan(x)]
                want = math.nan if not row else (min(row) if metric == "auc" else max(row))
                assert (math.isnan(want) and math.isnan(got[r, m])) or got[r, m] == want


def test_self_relative_is_zero():
    s, y, g, names = _data(seed=4)
    spec = BootstrapSpec(B=30, seed=5)
    d1 = bootstrap_distribution_from_scores([s, s * 0.9], y, g, names, spec)
    d2 = bootstrap_distribution_from_scores([s, s * 0.9], y, g, names, spec)
    for ci in relative_ci(d1, d2).values():
        assert ci == (0.0, 0.0)


def test_relative_differences_brute_force():
    s, y, g, names = _data(seed=6)
    spec = BootstrapSpec(B=10, seed=1)
    a = bootstrap_distribution_from_scores([s, np.sqrt(s)], y, g, names, spec)
    b = bootstrap_distribution_from_scores([s ** 2], y, g, names, spec)
    diffs = relative_differences(a, b)
    for r, idx in enumerate(bootstrap_indices(spec, y, g, names)):
        ta = [group_metric_table(x[idx], y[idx], g[idx], names).as_array() for x in (s, np.sqrt(s))]
        tb = group_metric_table(s[idx] ** 2, y[idx], g[idx], names).as_array()
        np.testing.assert_allclose(diffs[r], (ta[0] + ta[1]) / 2 - tb, rtol=0, atol=1e-14)


def test_relative_needs_matching_seed_and_b():
    s, y, g, names = _data()
    a = bootstrap_distribution_from_scores([s], y, g, names, BootstrapSpec(B=5, seed=0))
    with pytest.raises(ConfigError):
        relative_differences(a, bootstrap_distribution_from_scores([s], y, g, names, BootstrapSpec(B=5, seed=1)))
    with pytest.raises(ConfigError):
        relative_differences(a, bootstrap_distribution_from_scores([s], y, g, names, BootstrapSpec(B=6, seed=0)))


def test_constant_predictor_loss_ci_degenerate_within_stratum():
    # with one group and constant scores the resampled label mix is fixed by stratification
    y = np.r_[np.zeros(60, int), np.ones(40, int)]
    g = np.zeros(100, int)
    s = np.full(100, 0.4)
    dist = bootstrap_distribution_from_scores([s], y, g, ("all",), BootstrapSpec(B=40), metrics=("auc", "loss"))
    lo, hi = percentile_ci(dist.pooled("loss", "overall"))
    assert hi - lo < 1e-12
    assert percentile_ci(dist.pooled("auc", "overall")) == (0.5, 0.5)


def test_report_layout():
    s, y, g, names = _data(k=2)
    spec = BootstrapSpec(B=20, seed=0)
    dist = bootstrap_distribution_from_scores([s], y, g, names, spec)
    base = bootstrap_distribution_from_scores([s ** 2], y, g, names, spec)
    rep = metric_report(dist, 0.05, baseline=base)
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) - 1 == 3 * (2 + 2)
    row = next(r for r in rep.rows if r["metric"] == "loss" and r["scope"] == "worst_case")
    assert (row["lower"], row["upper"]) == worst_case_ci(dist, "loss")
    assert rep.to_dict()["B"] == 20
