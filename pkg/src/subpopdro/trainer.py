"""ERM and group-DRO training.

DRO alternates an exponentiated-gradient step on the group weights (lambda)
with an Adam step on the lambda-weighted cross-entropy. The lambda step can be
driven by group losses, group losses plus additive adjustments, or any
per-group score such as 1 - AUC.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

from subpopdro import model as mdl
from subpopdro.dataset import BalancedSampler, Dataset, Partition, minibatch_standard
from subpopdro.errors import ConfigError, DataError, NumericError
from subpopdro.metrics import auc, group_metric_table

FAMILIES = ("ERM", "DRO")
DRO_METRICS = ("loss", "auc")
ADJUSTMENTS = ("none", "reciprocal", "proportional", "marginal_baseline")
SAMPLERS = ("standard", "balanced")
EARLY_STOP_RULES = ("pooled_loss", "weighted_objective", "worst_group_loss", "worst_group_auc")
RATE_CLIP = 1e-6
SIMPLEX_TOL = 1e-9


# --------------------------------------------------------------------------
# lambda updates


def check_simplex(lam: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if np.any(~np.isfinite(lam)) or np.any(lam < 0) or abs(lam.sum() - 1.0) > tol:
        raise NumericError(f"group weights left the simplex: {lam}")


def _exp_grad_step(lam, scores, eta, present=None) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if present is None:
        present = np.ones(lam.shape, dtype=bool)
    if np.any(~np.isfinite(s[present])):
        raise NumericError(f"non-finite group scores in lambda update: {s}")
    expo = np.where(present, eta * np.where(present, s, 0.0), 0.0)
    expo -= expo.max()
    if not np.any(expo):
        # every factor is exp(0) = 1, so lambda is an exact fixed point
        return lam.copy()
    new = lam * np.exp(expo)
    new /= new.sum()
    if np.any(~np.isfinite(new)):
        raise NumericError(f"lambda update produced non-finite weights for scores {s}")
    return new


def lambda_update_loss(lam, group_losses, adjustments, eta: float, present=None) -> np.ndarray:
    """lam_k <- lam_k exp(eta (l_k + c_k)), renormalised.

    Groups with `present[k]` False keep exponent 0.
    """
    return _exp_grad_step(lam, np.asarray(group_losses) + np.asarray(adjustments), eta, present)


def lambda_update_metric(lam, g_values, eta: float, present=None) -> np.ndarray:
    return _exp_grad_step(lam, g_values, eta, present)


def g_auc(scores, labels) -> float:
    """1 - AUC with half-credit ties; NaN when the sample is single-class."""
    a = auc(scores, labels)
    return math.nan if math.isnan(a) else 1.0 - a


def compute_adjustments(
    kind: str,
    C: float,
    group_counts,
    n_total: int,
    batch_labels=None,
    batch_groups=None,
    previous=None,
) -> np.ndarray:
    """Per-group additive offsets c_k.

    reciprocal: C / p_k; proportional: C * sqrt(p_k), with p_k = n_k / N over
    the training split. marginal_baseline: p log p + (1-p) log(1-p) of the
    group's label rate in the current batch; groups absent from the batch
    keep `previous` (zeros initially).
    """
    counts = np.asarray(group_counts, dtype=np.float64)
    k = counts.size
    if kind == "none":
        return np.zeros(k)
    if kind == "reciprocal":
        return C / (counts / n_total)
    if kind == "proportional":
        return C * np.sqrt(counts / n_total)
    if kind != "marginal_baseline":
        raise ConfigError(f"unknown adjustment {kind!r}")
    out = np.zeros(k) if previous is None else np.array(previous, dtype=np.float64)
    y = np.asarray(batch_labels, dtype=np.float64)
    g = np.asarray(batch_groups, dtype=np.int64)
    n_k = np.bincount(g, minlength=k)
    pos_k = np.bincount(g, weights=y, minlength=k)
    seen = n_k > 0
    rate = np.clip(pos_k[seen] / n_k[seen], RATE_CLIP, 1 - RATE_CLIP)
    out[seen] = rate * np.log(rate) + (1 - rate) * np.log(1 - rate)
    return out


def weighted_example_weights(lam, batch_groups) -> np.ndarray:
    """Per-example weights lam_{a_i} / B_{a_i} so that sum_i w_i l_i = sum_k lam_k mean_k(l)."""
    lam = np.asarray(lam, dtype=np.float64)
    g = np.asarray(batch_groups, dtype=np.int64)
    if g.size == 0:
        raise DataError("cannot weight an empty batch")
    counts = np.bincount(g, minlength=lam.size)
    return lam[g] / counts[g]


# --------------------------------------------------------------------------
# specs and results


@dataclass(frozen=True)
class ObjectiveSpec:
    family: str = "ERM"
    dro_metric: str = "loss"
    adjustment: str = "none"
    eta: float = 0.1
    C: float = 0.0
    sampler: str = "standard"
    early_stop: str = "pooled_loss"
    learning_rate: float = 1e-4
    max_iterations: int = 150
    minibatches_per_iteration: int = 100
    batch_size: int = 512
    patience: int = 25

    def __post_init__(self):
        checks = [
            (self.family, FAMILIES, "family"),
            (self.dro_metric, DRO_METRICS, "dro_metric"),
            (self.adjustment, ADJUSTMENTS, "adjustment"),
            (self.sampler, SAMPLERS, "sampler"),
            (self.early_stop, EARLY_STOP_RULES, "early_stop"),
        ]
        for value, allowed, name in checks:
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")
        if self.adjustment != "none" and not (self.family == "DRO" and self.dro_metric == "loss"):
            raise ConfigError("adjustments apply only to loss-driven DRO")
        if self.adjustment in ("reciprocal", "proportional") and self.C <= 0:
            raise ConfigError("size adjustments need C > 0")
        if self.family == "DRO" and self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("max_iterations", "minibatches_per_iteration", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def variant(self) -> str:
        """Short name of the objective: erm, dro, dro_reciprocal, ..., dro_auc."""
        if self.family == "ERM":
            return "erm"
        if self.dro_metric == "auc":
            return "dro_auc"
        return {
            "none": "dro",
            "reciprocal": "dro_reciprocal",
            "proportional": "dro_proportional",
            "marginal_baseline": "dro_marginal",
        }[self.adjustment]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        return cls(**d)


@dataclass
class TrainedModel:
    params: mdl.ModelParams
    objective: ObjectiveSpec
    fold_id: int
    seed: int
    history: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    group: int | None = None

    @property
    def lambda_trajectory(self) -> np.ndarray:
        return np.array([h["lambda"] for h in self.history])

    def predict(self, X, groups=None) -> np.ndarray:
        return mdl.forward(self.params, X, mode="eval")

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "objective": self.objective.to_dict(),
            "fold_id": self.fold_id,
            "seed": self.seed,
            "history": self.history,
            "best_iteration": self.best_iteration,
            "group": self.group,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        return cls(
            mdl.ModelParams.from_dict(d["params"]),
            ObjectiveSpec.from_dict(d["objective"]),
            int(d["fold_id"]),
            int(d["seed"]),
            d["history"],
            int(d["best_iteration"]),
            d.get("group"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


class CompositePredictor:
    """Routes each example to the model trained for its group."""

    def __init__(self, models_by_group: dict[int, TrainedModel]):
        self.models_by_group = dict(models_by_group)

    def predict(self, X, groups) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        groups = np.asarray(groups)
        out = np.empty(len(X))
        for k in np.unique(groups):
            if int(k) not in self.models_by_group:
                raise ConfigError(f"no model for group {int(k)}")
            sel = groups == k
            out[sel] = self.models_by_group[int(k)].predict(X[sel])
        return out


# --------------------------------------------------------------------------
# early stopping


def dev_metrics(params: mdl.ModelParams, ds: Dataset, dev_idx) -> dict:
    p = mdl.forward(params, ds.features[dev_idx])
    table = group_metric_table(
        p, ds.labels[dev_idx], ds.groups[dev_idx], ds.group_names, metrics=("auc", "loss")
    )
    return {
        "pooled_loss": table.overall["loss"],
        "pooled_auc": table.overall["auc"],
        "group_loss": table.per_group["loss"].tolist(),
        "group_auc": table.per_group["auc"].tolist(),
    }


def early_stop_value(rule: str, metrics: dict, lam=None) -> float:
    """Criterion to minimise."""
    losses = np.asarray(metrics["group_loss"], dtype=np.float64)
    if rule == "pooled_loss":
        return float(metrics["pooled_loss"])
    if rule == "worst_group_loss":
        return float(np.nanmax(losses))
    if rule == "worst_group_auc":
        aucs = np.asarray(metrics["group_auc"], dtype=np.float64)
        if np.all(np.isnan(aucs)):
            return math.nan
        return -float(np.nanmin(aucs))
    if rule == "weighted_objective":
        lam = np.full(losses.size, 1.0 / losses.size) if lam is None else np.asarray(lam)
        return float(np.dot(lam, losses))
    raise ConfigError(f"unknown early-stop rule {rule!r}")


# --------------------------------------------------------------------------
# training loops


def _train_core(
    ds: Dataset,
    pool_idx: np.ndarray,
    dev_idx: np.ndarray,
    model_spec: mdl.ModelSpec,
    obj: ObjectiveSpec,
    seed: int,
    group_counts_train: np.ndarray,
    n_train: int,
    on_step: Callable | None = None,
) -> tuple[mdl.ModelParams, list[dict], int]:
    k = ds.k
    rng = np.random.default_rng(seed)
    params = mdl.init(model_spec, ds.m)
    lam = np.full(k, 1.0 / k)
    adjust = compute_adjustments(obj.adjustment, obj.C, group_counts_train, n_train) \
        if obj.adjustment in ("reciprocal", "proportional") else np.zeros(k)
    last_g = np.full(k, 0.5)
    is_dro = obj.family == "DRO"
    erm_weights = np.full(obj.batch_size, 1.0 / obj.batch_size)

    if obj.sampler == "balanced":
        sampler = BalancedSampler(ds, pool_idx)
        draw = sampler.sample
    else:
        def draw(b, r):
            return minibatch_standard(ds, pool_idx, b, r)

    X, Y, G = ds.features, ds.labels, ds.groups
    best_value = math.inf
    best_params = None
    best_iter = 0
    since_best = 0
    history = []
    for it in range(obj.max_iterations):
        for b in range(obj.minibatches_per_iteration):
            try:
                idx = draw(obj.batch_size, rng)
                xb, yb, gb = X[idx], Y[idx], G[idx]
                masks = mdl.sample_masks(params, len(idx), rng)
                z, acts = mdl.forward_cache(params, xb, masks)
                if is_dro:
                    present = np.bincount(gb, minlength=k) > 0
                    if obj.dro_metric == "loss":
                        ce = mdl.cross_entropy(expit(z), yb)
                        n_k = np.bincount(gb, minlength=k)
                        group_loss = np.bincount(gb, weights=ce, minlength=k) / np.maximum(n_k, 1)
                        if obj.adjustment == "marginal_baseline":
                            adjust = compute_adjustments(
                                "marginal_baseline", obj.C, group_counts_train, n_train,
                                yb, gb, previous=adjust,
                            )
                        lam = lambda_update_loss(lam, group_loss, adjust, obj.eta, present)
                    else:
                        for j in np.flatnonzero(present):
                            gj = g_auc(z[gb == j], yb[gb == j])
                            if not math.isnan(gj):
                                last_g[j] = gj
                        lam = lambda_update_metric(lam, last_g, obj.eta, present)
                    weights = weighted_example_weights(lam, gb)
                else:
                    weights = erm_weights
                _, grads = mdl.backward(params, z, acts, masks, yb, weights)
                mdl.optimizer_step(params, grads, obj.learning_rate)
            except NumericError as e:
                raise NumericError(f"iteration {it}, minibatch {b}: {e}") from e
            if on_step is not None:
                on_step(it, b, params, lam)

        metrics = dev_metrics(params, ds, dev_idx)
        value = early_stop_value(obj.early_stop, metrics, lam)
        history.append({"iteration": it, "criterion": value, "lambda": lam.tolist(), **metrics})
        if value < best_value:
            best_value, best_params, best_iter, since_best = value, params.copy(), it, 0
        else:
            since_best += 1
            if since_best >= obj.patience:
                break
    if best_params is None:
        best_params, best_iter = params.copy(), len(history) - 1
    return best_params, history, best_iter


def train(
    ds: Dataset,
    part: Partition,
    fold_id: int,
    model_spec: mdl.ModelSpec,
    obj: ObjectiveSpec,
    seed: int = 0,
    on_step: Callable | None = None,
) -> TrainedModel:
    """Train on the four folds other than `fold_id`, early-stopping on that fold."""
    pool, dev = part.fold_split(fold_id)
    train_idx = np.asarray(part.train_idx, dtype=np.int64)
    counts = ds.group_counts(train_idx)
    params, history, best = _train_core(
        ds, pool, dev, model_spec, obj, seed, counts, train_idx.size, on_step
    )
    return TrainedModel(params, obj, fold_id, seed, history, best)


def group_subset(ds: Dataset, group_id: int, indices) -> tuple[Dataset, np.ndarray]:
    """Rows of `indices` belonging to `group_id`, as a one-group Dataset plus their original ids."""
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.sort(indices[ds.groups[indices] == group_id])
    sub = Dataset(
        ds.features[rows],
        ds.labels[rows],
        np.zeros(rows.size, dtype=np.int64),
        (ds.group_names[group_id],),
        ds.feature_names,
    )
    return sub, rows


def train_stratified(
    ds: Dataset,
    part: Partition,
    fold_id: int,
    model_spec: mdl.ModelSpec,
    group_id: int,
    obj: ObjectiveSpec | None = None,
    seed: int = 0,
) -> TrainedModel:
    """Pooled ERM restricted to one group, early-stopping on that group's dev loss."""
    obj = obj or ObjectiveSpec()
    if obj.family != "ERM" or obj.sampler != "standard" or obj.early_stop != "pooled_loss":
        raise ConfigError("stratified training uses ERM, standard sampling and pooled-loss early stopping")
    if not 0 <= group_id < ds.k:
        raise ConfigError(f"group_id must be in [0, {ds.k})")
    name = ds.group_names[group_id]
    pool, dev = part.fold_split(fold_id)
    keep = np.concatenate([pool, dev])
    sub, rows = group_subset(ds, group_id, keep)
    position = {int(r): i for i, r in enumerate(rows)}
    pool_g = np.array([position[int(i)] for i in pool if int(i) in position], dtype=np.int64)
    dev_g = np.array([position[int(i)] for i in dev if int(i) in position], dtype=np.int64)
    pos_pool = int(sub.labels[pool_g].sum()) if pool_g.size else 0
    if pos_pool < 2 or pool_g.size - pos_pool < 2:
        raise DataError(f"group {name!r} needs >= 2 examples of each class in the training pool")
    if dev_g.size == 0 or sub.labels[dev_g].min() == sub.labels[dev_g].max():
        raise DataError(f"group {name!r} has a single-class development fold")

    train_idx = np.asarray(part.train_idx, dtype=np.int64)
    n_train_g = int(np.sum(ds.groups[train_idx] == group_id))
    params, history, best = _train_core(
        sub, pool_g, dev_g, model_spec, obj, seed, np.array([n_train_g]), n_train_g
    )
    return TrainedModel(params, obj, fold_id, seed, history, best, group=group_id)
