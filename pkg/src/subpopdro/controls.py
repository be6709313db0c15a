"""Synthetic positive and null controls for the group-DRO mechanism.

The positive control has a minority whose conditional P(Y|X) opposes the
majority's, so a single linear model must trade the groups off and DRO
should shift weight to the minority. The null control shares P(Y|X) across
groups, so a well-specified pooled model is already optimal for every group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from subpopdro.dataset import SyntheticSpec, partition, standardize, synthesize
from subpopdro.metrics import group_metric_table
from subpopdro.model import ModelSpec
from subpopdro.trainer import ObjectiveSpec, train

POSITIVE_COEF = (1.5, -1.0, 0.5)
DRO_VARIANT_FIELDS = {
    "dro": dict(family="DRO"),
    "dro_reciprocal": dict(family="DRO", adjustment="reciprocal", C=0.1),
    "dro_proportional": dict(family="DRO", adjustment="proportional", C=0.1),
    "dro_marginal": dict(family="DRO", adjustment="marginal_baseline"),
    "dro_auc": dict(family="DRO", dro_metric="auc"),
}


def positive_control_spec(seed: int, n: int = 20_000, minority_scale: float = 0.5) -> SyntheticSpec:
    """90/10 split; the minority's coefficients are the majority's negated and scaled."""
    w = np.asarray(POSITIVE_COEF)
    return SyntheticSpec(
        group_proportions=[0.9, 0.1],
        means=[[0.0] * 3, [0.0] * 3],
        coefs=[w.tolist(), (-minority_scale * w).tolist()],
        intercepts=[0.0, 0.0],
        n=n,
        seed=seed,
        group_names=("majority", "minority"),
    )


def null_control_spec(seed: int, n: int = 50_000) -> SyntheticSpec:
    """Three groups with different covariate means but one shared logistic P(Y|X)."""
    w = [1.0, -0.7, 0.4, 0.2]
    return SyntheticSpec(
        group_proportions=[0.6, 0.3, 0.1],
        means=[[0.0, 0.0, 0.0, 0.0], [0.6, -0.3, 0.0, 0.4], [-0.5, 0.5, 0.5, -0.5]],
        coefs=[w, w, w],
        intercepts=[-0.2, -0.2, -0.2],
        n=n,
        seed=seed,
        group_names=("a", "b", "c"),
    )


@dataclass
class ControlResult:
    variant: str
    seed: int
    final_lambda: list[float]
    worst_group_test_loss: float
    group_test_loss: list[float]


def run_control(spec: SyntheticSpec, variants: dict[str, dict], seed: int,
                learning_rate: float = 0.01, eta: float = 0.1, **obj_kw) -> list[ControlResult]:
    """Train a logistic model per variant on fold 0 and score worst-group loss on the test split.

    ERM early-stops on pooled loss and DRO on worst-group loss.
    """
    ds = synthesize(spec)
    part = partition(ds, seed)
    ds = standardize(ds, part.train_idx)
    test = np.asarray(part.test_idx)
    out = []
    for name, fields in variants.items():
        is_dro = fields.get("family", "ERM") == "DRO"
        obj = ObjectiveSpec(
            **fields,
            eta=eta if is_dro else 0.1,
            learning_rate=learning_rate,
            early_stop="worst_group_loss" if is_dro else "pooled_loss",
            **obj_kw,
        )
        tm = train(ds, part, 0, ModelSpec(), obj, seed=seed)
        p = tm.predict(ds.features[test])
        table = group_metric_table(p, ds.labels[test], ds.groups[test], ds.group_names, metrics=("loss",))
        out.append(ControlResult(
            name, seed, list(tm.history[-1]["lambda"]),
            float(table.worst_case["loss"]), table.per_group["loss"].tolist(),
        ))
    return out


def positive_control(seeds=range(5), **kw) -> list[ControlResult]:
    variants = {"erm": dict(family="ERM"), "dro": dict(family="DRO")}
    return [r for s in seeds for r in run_control(positive_control_spec(s), variants, s, **kw)]


def null_control(seeds=range(5), **kw) -> list[ControlResult]:
    variants = {"erm": dict(family="ERM"), **DRO_VARIANT_FIELDS}
    return [r for s in seeds for r in run_control(null_control_spec(s), variants, s, **kw)]


def medians(results: list[ControlResult]) -> dict[str, dict[str, float]]:
    """Per variant, the median worst-group test loss and median final lambda of the last group."""
    out = {}
    for name in dict.fromkeys(r.variant for r in results):
        rs = [r for r in results if r.variant == name]
        out[name] = {
            "worst_group_loss": float(np.median([r.worst_group_test_loss for r in rs])),
            "lambda_last": float(np.median([r.final_lambda[-1] for r in rs])),
        }
    return out
