"""Hyperparameter grids, five-fold sweeps with a resumable record store, and
model selection by pooled or worst-case criteria."""

from __future__ import annotations

import itertools
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from subpopdro.dataset import N_FOLDS, Dataset, Partition
from subpopdro.errors import ConfigError, DataError, NumericError
from subpopdro.metrics import GroupMetricTable, group_metric_table
from subpopdro.model import ModelSpec
from subpopdro.trainer import (
    CompositePredictor,
    ObjectiveSpec,
    TrainedModel,
    group_subset,
    train,
    train_stratified,
)

log = logging.getLogger(__name__)

VARIANTS = ("erm", "dro", "dro_proportional", "dro_reciprocal", "dro_marginal", "dro_auc")
CRITERIA = ("mean_loss", "worst_group_loss", "worst_group_auc")
SIZE_ADJUSTED = ("dro_proportional", "dro_reciprocal")
_VARIANT_FIELDS = {
    "erm": dict(family="ERM"),
    "dro": dict(family="DRO", dro_metric="loss", adjustment="none"),
    "dro_proportional": dict(family="DRO", dro_metric="loss", adjustment="proportional"),
    "dro_reciprocal": dict(family="DRO", dro_metric="loss", adjustment="reciprocal"),
    "dro_marginal": dict(family="DRO", dro_metric="loss", adjustment="marginal_baseline"),
    "dro_auc": dict(family="DRO", dro_metric="auc", adjustment="none"),
}


@dataclass
class GridSpec:
    """Axes of a grid search. Defaults reproduce the pooled ERM grid."""

    learning_rate: list = field(default_factory=lambda: [1e-4, 1e-5])
    hidden_layers: list = field(default_factory=lambda: [1, 3])
    hidden_width: list = field(default_factory=lambda: [128, 256])
    dropout: list = field(default_factory=lambda: [0.25, 0.75])
    weight_decay: list = field(default_factory=lambda: [0.0])
    objectives: list = field(default_factory=lambda: ["erm"])
    eta: list = field(default_factory=lambda: [1.0, 0.1, 0.01])
    C: list = field(default_factory=lambda: [1.0, 0.1, 0.01])
    sampler: list = field(default_factory=lambda: ["standard", "balanced"])
    early_stop: list = field(
        default_factory=lambda: ["pooled_loss", "weighted_objective", "worst_group_loss", "worst_group_auc"]
    )
    max_iterations: int = 150
    minibatches_per_iteration: int = 100
    batch_size: int = 512
    patience: int = 25

    def __post_init__(self):
        for name in ("learning_rate", "hidden_layers", "hidden_width", "dropout", "weight_decay",
                     "objectives", "eta", "C", "sampler", "early_stop"):
            val = getattr(self, name)
            if not isinstance(val, (list, tuple)):
                val = [val]
            if len(val) == 0:
                raise ConfigError(f"grid axis {name!r} is empty")
            setattr(self, name, list(val))
        bad = [v for v in self.objectives if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown objectives {bad}; choose from {VARIANTS}")

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Config:
    config_id: str
    objective: ObjectiveSpec
    model: ModelSpec

    def fingerprint(self) -> str:
        return json.dumps({"objective": self.objective.to_dict(), "model": self.model.to_dict()}, sort_keys=True)


def expand_grid(spec: GridSpec, prefix: str = "cfg", init_seed: int = 0) -> list[Config]:
    """Cartesian product of the axes with inapplicable values collapsed and duplicates dropped.

    eta only varies for DRO, C only for size-adjusted DRO, width and dropout
    only with hidden layers, weight decay only without; pooled_loss early
    stopping is ERM-only and weighted_objective DRO-only.
    """
    seen = set()
    configs = []
    axes = itertools.product(
        spec.objectives, spec.hidden_layers, spec.hidden_width, spec.dropout, spec.weight_decay,
        spec.learning_rate, spec.sampler, spec.early_stop, spec.eta, spec.C,
    )
    for variant, layers, width, dropout, wd, lr, sampler, early, eta, C in axes:
        is_dro = variant != "erm"
        if early == "pooled_loss" and is_dro:
            continue
        if early == "weighted_objective" and not is_dro:
            continue
        if layers == 0:
            width, dropout = 0, 0.0
        else:
            wd = 0.0
        if not is_dro:
            eta = 0.0
        if variant not in SIZE_ADJUSTED:
            C = 0.0
        hidden = tuple([int(width)] * int(layers))
        obj = ObjectiveSpec(
            **_VARIANT_FIELDS[variant], eta=float(eta), C=float(C), sampler=sampler,
            early_stop=early, learning_rate=float(lr), max_iterations=spec.max_iterations,
            minibatches_per_iteration=spec.minibatches_per_iteration,
            batch_size=spec.batch_size, patience=spec.patience,
        )
        mspec = ModelSpec(hidden_sizes=hidden, dropout_p=float(dropout), weight_decay=float(wd),
                          init_seed=init_seed)
        key = (obj, mspec)
        if key in seen:
            continue
        seen.add(key)
        configs.append(Config(f"{prefix}{len(configs):04d}", obj, mspec))
    if not configs:
        raise ConfigError("grid is empty after pruning")
    return configs


def fix_model_axes(spec: GridSpec, model: ModelSpec, learning_rate: float) -> GridSpec:
    """Copy of `spec` with model axes pinned to one selected model."""
    layers = len(model.hidden_sizes)
    d = spec.to_dict()
    d.update(
        learning_rate=[learning_rate],
        hidden_layers=[layers],
        hidden_width=[model.hidden_sizes[0] if layers else 0],
        dropout=[model.dropout_p],
        weight_decay=[model.weight_decay],
    )
    return GridSpec(**d)


# --------------------------------------------------------------------------
# sweep


@dataclass
class RunRecord:
    config_id: str
    fold_id: int
    fingerprint: str
    status: str
    val_table: GroupMetricTable | None = None
    dev_table: GroupMetricTable | None = None
    model_path: str | None = None
    group: int | None = None
    error: str | None = None

    @property
    def key(self) -> str:
        suffix = "" if self.group is None else f"_g{self.group}"
        return f"{self.config_id}_f{self.fold_id}{suffix}"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def config(self) -> Config:
        d = json.loads(self.fingerprint)
        return Config(self.config_id, ObjectiveSpec.from_dict(d["objective"]), ModelSpec.from_dict(d["model"]))

    def to_dict(self) -> dict:
        return {
            "config_id": self.config_id,
            "fold_id": self.fold_id,
            "group": self.group,
            "fingerprint": self.fingerprint,
            "status": self.status,
            "val_table": self.val_table.to_dict() if self.val_table else None,
            "dev_table": self.dev_table.to_dict() if self.dev_table else None,
            "model_path": self.model_path,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            d["config_id"], int(d["fold_id"]), d["fingerprint"], d["status"],
            GroupMetricTable.from_dict(d["val_table"]) if d.get("val_table") else None,
            GroupMetricTable.from_dict(d["dev_table"]) if d.get("dev_table") else None,
            d.get("model_path"), d.get("group"), d.get("error"),
        )


class RecordStore:
    """Directory of per-run JSON records and model files plus an index."""

    def __init__(self, root):
        self.root = Path(root)
        (self.root / "records").mkdir(parents=True, exist_ok=True)
        (self.root / "models").mkdir(parents=True, exist_ok=True)

    def record_path(self, key: str) -> Path:
        return self.root / "records" / f"{key}.json"

    def get(self, key: str) -> RunRecord | None:
        p = self.record_path(key)
        return RunRecord.from_dict(json.loads(p.read_text())) if p.exists() else None

    def put(self, rec: RunRecord) -> None:
        tmp = self.record_path(rec.key).with_suffix(".tmp")
        tmp.write_text(json.dumps(rec.to_dict(), sort_keys=True))
        tmp.replace(self.record_path(rec.key))

    def all(self) -> list[RunRecord]:
        return [RunRecord.from_dict(json.loads(p.read_text()))
                for p in sorted((self.root / "records").glob("*.json"))]

    def write_index(self) -> None:
        index = {r.key: {"status": r.status, "config_id": r.config_id, "fold_id": r.fold_id,
                         "group": r.group} for r in self.all()}
        (self.root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))

    def load_model(self, rec: RunRecord) -> TrainedModel:
        return TrainedModel.load(self.root / rec.model_path)


def run_seed(seed: int, fold_id: int) -> int:
    return int(np.random.SeedSequence([seed, fold_id]).generate_state(1)[0])


def _table_on(model: TrainedModel, ds: Dataset, idx) -> GroupMetricTable:
    idx = np.asarray(idx, dtype=np.int64)
    p = model.predict(ds.features[idx])
    return group_metric_table(p, ds.labels[idx], ds.groups[idx], ds.group_names)


def _run_task(args) -> RunRecord:
    ds, part, cfg, fold_id, group, seed, store_root = args
    rseed = run_seed(seed, fold_id)
    mspec = ModelSpec(**{**cfg.model.to_dict(), "init_seed": rseed})
    rec = RunRecord(cfg.config_id, fold_id, cfg.fingerprint(), "failed", group=group)
    try:
        if group is None:
            tm = train(ds, part, fold_id, mspec, cfg.objective, seed=rseed)
            val_table = _table_on(tm, ds, part.val_idx)
            dev_table = _table_on(tm, ds, part.folds[fold_id])
        else:
            tm = train_stratified(ds, part, fold_id, mspec, group, cfg.objective, seed=rseed)
            sub_val, _ = group_subset(ds, group, part.val_idx)
            sub_dev, _ = group_subset(ds, group, part.folds[fold_id])
            val_table = _table_on(tm, sub_val, np.arange(sub_val.n))
            dev_table = _table_on(tm, sub_dev, np.arange(sub_dev.n))
    except (NumericError, DataError, ConfigError) as e:
        rec.error = f"{type(e).__name__}: {e}"
        return rec
    except Exception as e:  # keep the sweep alive; the record carries the traceback
        rec.error = "".join(traceback.format_exception_only(type(e), e)).strip()
        return rec
    rec.status = "ok"
    rec.val_table, rec.dev_table = val_table, dev_table
    if store_root is not None:
        rel = Path("models") / f"{rec.key}.json"
        tm.save(Path(store_root) / rel)
        rec.model_path = rel.as_posix()
    return rec


def run_sweep(
    ds: Dataset,
    part: Partition,
    configs: list[Config],
    seed: int = 0,
    store: RecordStore | None = None,
    jobs: int = 1,
    groups: list[int] | None = None,
) -> list[RunRecord]:
    """Train every config on every fold; with `groups`, one stratified run per group.

    Records already in `store` with a matching fingerprint are reused.
    """
    if len(part.folds) != N_FOLDS:
        raise ConfigError(f"partition must have {N_FOLDS} folds")
    targets = [None] if groups is None else list(groups)
    results: dict[str, RunRecord] = {}
    todo = []
    for cfg in configs:
        for fold_id in range(N_FOLDS):
            for group in targets:
                probe = RunRecord(cfg.config_id, fold_id, cfg.fingerprint(), "pending", group=group)
                existing = store.get(probe.key) if store is not None else None
                if existing is not None and existing.fingerprint == probe.fingerprint and existing.ok:
                    results[probe.key] = existing
                    continue
                todo.append((ds, part, cfg, fold_id, group, seed, None if store is None else str(store.root)))

    def finish(rec):
        if not rec.ok:
            log.warning("run %s failed: %s", rec.key, rec.error)
        if store is not None:
            store.put(rec)
        results[rec.key] = rec

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_run_task, todo):
                finish(rec)
    else:
        for task in todo:
            finish(_run_task(task))
    if store is not None:
        store.write_index()
    order = {c.config_id: i for i, c in enumerate(configs)}
    return sorted(results.values(), key=lambda r: (order[r.config_id], r.fold_id, r.group or 0))


# --------------------------------------------------------------------------
# selection


@dataclass
class Selection:
    criterion: str
    config_id: str
    records: list[RunRecord]
    ranking: list[dict]

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "winner": self.config_id,
            "fingerprint": self.records[0].fingerprint,
            "model_paths": [r.model_path for r in self.records],
            "ranking": self.ranking,
        }


def complete_configs(records: list[RunRecord]) -> dict[str, list[RunRecord]]:
    """Configs with all five folds trained successfully, folds in order."""
    by_cfg: dict[str, list[RunRecord]] = {}
    for r in records:
        by_cfg.setdefault(r.config_id, []).append(r)
    out = {}
    for cid in sorted(by_cfg):
        recs = sorted(by_cfg[cid], key=lambda r: r.fold_id)
        if len(recs) == N_FOLDS and all(r.ok for r in recs) and [r.fold_id for r in recs] == list(range(N_FOLDS)):
            out[cid] = recs
        else:
            log.warning("config %s excluded from selection: incomplete or failed folds", cid)
    return out


def fold_averaged(recs: list[RunRecord]) -> dict:
    """Average each per-group validation metric over the fold models."""
    with np.errstate(all="ignore"):
        group_loss = np.mean([r.val_table.per_group["loss"] for r in recs], axis=0)
        aucs = np.array([r.val_table.per_group["auc"] for r in recs])
        group_auc = np.array([np.nan if np.all(np.isnan(c)) else np.nanmean(c) for c in aucs.T])
    pooled_loss = float(np.mean([r.val_table.overall["loss"] for r in recs]))
    return {"pooled_loss": pooled_loss, "group_loss": group_loss, "group_auc": group_auc}


def criterion_value(avg: dict, criterion: str) -> float:
    """Score to minimise."""
    if criterion == "mean_loss":
        return avg["pooled_loss"]
    if criterion == "worst_group_loss":
        return float(np.max(avg["group_loss"]))
    if criterion == "worst_group_auc":
        a = avg["group_auc"]
        return math.inf if np.all(np.isnan(a)) else -float(np.nanmin(a))
    raise ConfigError(f"unknown selection criterion {criterion!r}")


def select(records: list[RunRecord], criterion: str) -> Selection:
    """Pick the config whose fold-averaged validation metrics are best under `criterion`.

    Per-group metrics are averaged over folds first, then reduced across
    groups. Ties go to the lower config id.
    """
    if criterion not in CRITERIA:
        raise ConfigError(f"criterion must be one of {CRITERIA}")
    complete = complete_configs(records)
    if not complete:
        raise ConfigError("no config has five successful folds")
    ranking = []
    for cid, recs in complete.items():
        avg = fold_averaged(recs)
        ranking.append({
            "config_id": cid,
            "score": criterion_value(avg, criterion),
            "pooled_loss": avg["pooled_loss"],
            "group_loss": [float(v) for v in avg["group_loss"]],
            "group_auc": [None if np.isnan(v) else float(v) for v in avg["group_auc"]],
        })
    ranking.sort(key=lambda row: (row["score"], row["config_id"]))
    winner = ranking[0]["config_id"]
    return Selection(criterion, winner, complete[winner], ranking)


def select_stratified(records_by_group: dict[int, list[RunRecord]]) -> dict[int, Selection]:
    """Per group, the config with the lowest fold-averaged loss on that group."""
    out = {}
    for group in sorted(records_by_group):
        recs = records_by_group[group]
        if not complete_configs(recs):
            raise ConfigError(f"group {group} has no config with five successful folds")
        out[group] = select(recs, "mean_loss")
    return out


def split_by_group(records: list[RunRecord]) -> dict[int, list[RunRecord]]:
    out: dict[int, list[RunRecord]] = {}
    for r in records:
        if r.group is None:
            raise ConfigError("record is not from a stratified sweep")
        out.setdefault(r.group, []).append(r)
    return out


def composite_models(selections: dict[int, Selection], load) -> list[CompositePredictor]:
    """One routing predictor per fold, combining each group's fold-f winner."""
    return [
        CompositePredictor({g: load(sel.records[f]) for g, sel in selections.items()})
        for f in range(N_FOLDS)
    ]
