import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subpopdro.dataset import partition, synthesize
from subpopdro.errors import ConfigError, DataError, NumericError
from subpopdro.model import ModelSpec
from subpopdro.trainer import (
    CompositePredictor,
    ObjectiveSpec,
    TrainedModel,
    check_simplex,
    compute_adjustments,
    early_stop_value,
    g_auc,
    lambda_update_loss,
    lambda_update_metric,
    train,
    train_stratified,
    weighted_example_weights,
)

from conftest import small_spec
from oracles import group_mean_objective


def quick(**kw):
    base = dict(learning_rate=0.01, max_iterations=3, minibatches_per_iteration=5, batch_size=32, patience=5)
    base.update(kw)
    return ObjectiveSpec(**base)


def test_lambda_loss_example():
    lam = lambda_update_loss([0.5, 0.5], [1.0, 0.0], [0.0, 0.0], eta=1.0)
    np.testing.assert_allclose(lam, [0.7310585786300049, 0.2689414213699951], rtol=0, atol=1e-15)


def test_lambda_metric_example():
    lam = lambda_update_metric([0.25, 0.75], [1.0, 0.0], eta=1.0)
    np.testing.assert_allclose(lam, [0.4753668864186717, 0.5246331135813284], rtol=0, atol=1e-15)


def test_lambda_eta_zero_and_k1_fixed_points():
    lam = np.array([0.2, 0.3, 0.5])
    assert np.array_equal(lambda_update_loss(lam, [3.0, -1.0, 7.0], np.zeros(3), eta=0.0), lam)
    assert np.array_equal(lambda_update_loss([1.0], [5.0], [0.0], eta=1.0), [1.0])


def test_lambda_absent_group_keeps_zero_exponent():
    lam = lambda_update_loss([0.5, 0.5], [1.0, 100.0], [0, 0], eta=1.0, present=np.array([True, False]))
    np.testing.assert_allclose(lam, [0.7310585786300049, 0.2689414213699951], atol=1e-15)


def test_lambda_overflow_safe():
    lam = lambda_update_loss([0.5, 0.5], [1e4, 0.0], [0, 0], eta=1.0)
    assert lam[0] == 1.0 and lam[1] == 0.0
    check_simplex(lam)


def test_lambda_rejects_nonfinite():
    with pytest.raises(NumericError):
        lambda_update_loss([0.5, 0.5], [math.nan, 0.0], [0, 0], eta=1.0)


@settings(max_examples=200, deadline=None)
@given(
    k=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
    eta=st.sampled_from([1.0, 0.1, 0.01]),
    shift=st.floats(-10, 10),
)
def test_lambda_simplex_and_shift_invariance(k, seed, eta, shift):
    rng = np.random.default_rng(seed)
    lam = rng.dirichlet(np.ones(k))
    losses = rng.uniform(-10, 10, k)
    new = lambda_update_loss(lam, losses, np.zeros(k), eta)
    check_simplex(new)
    shifted = lambda_update_loss(lam, losses + shift, np.zeros(k), eta)
    np.testing.assert_allclose(shifted, new, rtol=0, atol=1e-9)
    check_simplex(lambda_update_metric(lam, rng.uniform(0, 1, k), eta))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_lambda_moves_toward_worst_group(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    lam = rng.dirichlet(np.ones(k))
    losses = rng.uniform(0, 3, k)
    new = lambda_update_loss(lam, losses, np.zeros(k), 0.5)
    j = int(np.argmax(losses))
    if np.sum(losses == losses[j]) == 1:
        assert new[j] >= lam[j]


def test_g_auc():
    assert g_auc([0.1, 0.9], [0, 1]) == 0.0
    assert g_auc([0.9, 0.1], [0, 1]) == 1.0
    assert math.isnan(g_auc([0.1, 0.9], [1, 1]))


def test_adjustments():
    counts, n = np.array([75, 25]), 100
    np.testing.assert_allclose(compute_adjustments("reciprocal", 0.5, counts, n), [0.5 / 0.75, 2.0])
    np.testing.assert_allclose(compute_adjustments("proportional", 2.0, counts, n), [2 * math.sqrt(0.75), 1.0])
    assert np.array_equal(compute_adjustments("none", 1.0, counts, n), [0, 0])
    c = compute_adjustments("marginal_baseline", 0, counts, n, [1, 0, 1, 0], [0, 0, 0, 0], previous=[0.0, -0.3])
    assert c[0] == pytest.approx(math.log(0.5))
    assert c[1] == -0.3
    pure = compute_adjustments("marginal_baseline", 0, counts, n, [1, 1], [0, 1])
    assert np.all(np.abs(pure) < 1e-4) and np.all(pure < 0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_example_weights_match_group_mean_objective(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    b = int(rng.integers(1, 40))
    g = rng.integers(0, k, b)
    lam = rng.dirichlet(np.ones(k))
    losses = rng.uniform(0, 5, b)
    w = weighted_example_weights(lam, g)
    assert np.dot(w, losses) == pytest.approx(group_mean_objective(losses, g, lam), rel=1e-12)


def test_example_weights_uniform_balanced_batch_equals_erm():
    g = np.repeat([0, 1, 2, 3], 16)
    assert np.array_equal(weighted_example_weights(np.full(4, 0.25), g), np.full(64, 1 / 64))


def test_early_stop_values():
    m = {"pooled_loss": 0.4, "group_loss": [0.3, 0.9], "group_auc": [0.8, math.nan]}
    assert early_stop_value("pooled_loss", m) == 0.4
    assert early_stop_value("worst_group_loss", m) == 0.9
    assert early_stop_value("worst_group_auc", m) == -0.8
    assert early_stop_value("weighted_objective", m) == pytest.approx(0.6)
    assert early_stop_value("weighted_objective", m, [0.25, 0.75]) == pytest.approx(0.75)


def test_objective_validation_and_variants():
    with pytest.raises(ConfigError):
        ObjectiveSpec(family="ERM", adjustment="reciprocal", C=1.0)
    with pytest.raises(ConfigError):
        ObjectiveSpec(family="DRO", adjustment="reciprocal", C=0.0)
    with pytest.raises(ConfigError):
        ObjectiveSpec(sampler="weird")
    assert ObjectiveSpec().variant == "erm"
    assert ObjectiveSpec(family="DRO", dro_metric="auc").variant == "dro_auc"
    assert ObjectiveSpec(family="DRO", adjustment="marginal_baseline").variant == "dro_marginal"


@pytest.fixture(scope="module")
def ds_part():
    ds = synthesize(small_spec(n=1200, proportions=(0.6, 0.4)))
    return ds, partition(ds, seed=0)


def _trajectory(ds, part, model_spec, obj, seed):
    out = []
    train(ds, part, 0, model_spec, obj, seed, on_step=lambda it, b, p, lam: out.append(p.flat().copy()))
    return out


@pytest.mark.parametrize("cfg", range(3))
def test_eta_zero_reduces_to_erm(ds_part, cfg):
    ds, part = ds_part
    rng = np.random.default_rng(cfg)
    spec = ModelSpec(hidden_sizes=(int(rng.integers(2, 6)),) * int(rng.integers(0, 3)),
                     dropout_p=float(rng.choice([0.0, 0.25])), weight_decay=1e-3, init_seed=cfg)
    common = dict(sampler="balanced", early_stop="pooled_loss", batch_size=64)
    erm = _trajectory(ds, part, spec, quick(**common), seed=cfg)
    dro = _trajectory(ds, part, spec, quick(family="DRO", eta=0.0, **common), seed=cfg)
    assert len(erm) == len(dro) > 0
    assert all(np.array_equal(a, b) for a, b in zip(erm, dro))


def test_early_stopping_keeps_best_snapshot(ds_part):
    ds, part = ds_part
    spec = ModelSpec(hidden_sizes=(), init_seed=1)
    tm = train(ds, part, 1, spec, quick(max_iterations=8, patience=2, early_stop="pooled_loss"), seed=3)
    crit = [h["criterion"] for h in tm.history]
    assert tm.best_iteration == int(np.argmin(crit))
    assert len(tm.history) <= 8
    _, dev = part.fold_split(1)
    from subpopdro.trainer import dev_metrics
    assert dev_metrics(tm.params, ds, dev)["pooled_loss"] == pytest.approx(min(crit), abs=1e-12)


def test_dro_lambda_trajectory_on_simplex(ds_part):
    ds, part = ds_part
    tm = train(ds, part, 0, ModelSpec(hidden_sizes=(3,)),
               quick(family="DRO", eta=0.5, early_stop="worst_group_loss"), seed=0)
    for lam in tm.lambda_trajectory:
        check_simplex(np.asarray(lam))


def test_training_is_deterministic(ds_part):
    ds, part = ds_part
    obj = quick(family="DRO", dro_metric="auc", eta=0.3, early_stop="worst_group_auc")
    a = train(ds, part, 2, ModelSpec(hidden_sizes=(4,), dropout_p=0.25), obj, seed=5)
    b = train(ds, part, 2, ModelSpec(hidden_sizes=(4,), dropout_p=0.25), obj, seed=5)
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert a.history == b.history


def test_trained_model_round_trip(tmp_path, ds_part):
    ds, part = ds_part
    tm = train(ds, part, 0, ModelSpec(hidden_sizes=(3,)), quick(), seed=0)
    tm.save(tmp_path / "m.json")
    back = TrainedModel.load(tmp_path / "m.json")
    assert np.array_equal(back.predict(ds.features), tm.predict(ds.features))
    assert back.objective == tm.objective and back.history == tm.history


def test_stratified_and_composite(ds_part):
    ds, part = ds_part
    models = {j: train_stratified(ds, part, 0, ModelSpec(hidden_sizes=()), j, quick(), seed=0) for j in range(2)}
    comp = CompositePredictor(models)
    x, g = ds.features[:50], ds.groups[:50]
    p = comp.predict(x, g)
    for j in range(2):
        assert np.array_equal(p[g == j], models[j].predict(x[g == j]))
    with pytest.raises(ConfigError):
        train_stratified(ds, part, 0, ModelSpec(), 0, quick(family="DRO"))


def test_stratified_rejects_single_class_group():
    ds = synthesize(small_spec(n=800))
    labels = ds.labels.copy()
    labels[ds.groups == 1] = 0
    from subpopdro.dataset import Dataset
    ds2 = Dataset(ds.features, labels, ds.groups, ds.group_names, ds.feature_names)
    with pytest.raises(DataError, match="g1|group"):
        train_stratified(ds2, partition(ds2, 0), 0, ModelSpec(), 1, quick())


def test_example_weights_two_by_two():
    w = weighted_example_weights([0.5, 0.5], [0, 1, 0, 1])
    assert np.array_equal(w, [0.25] * 4)
    losses = np.array([1.0, 2.0, 3.0, 6.0])
    assert np.dot(w, losses) == pytest.approx((2.0 + 4.0) / 2)
