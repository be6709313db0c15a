"""Command-line pipeline: synth, run, select, evaluate, report.

Every command reads one experiment config (JSON or TOML). Outputs land in
the configured output directory:

    config.json            resolved config
    partition.json         train/val/test/fold indices
    store/                 run records, trained models, index.json
    selections/*.json      one per (method family, criterion)
    reports/*.{json,csv}   bootstrap metric reports
    summary.csv            all reports stacked (from `report`)
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from subpopdro.dataset import (
    Dataset,
    Partition,
    SyntheticSpec,
    load_csv,
    partition,
    standardize,
    synthesize,
    write_csv,
)
from subpopdro.errors import ConfigError, SubpopError
from subpopdro.evaluation import BootstrapSpec, bootstrap_distribution, metric_report
from subpopdro.trainer import CompositePredictor, TrainedModel
from subpopdro.selection import (
    CRITERIA,
    VARIANTS,
    GridSpec,
    RecordStore,
    RunRecord,
    Selection,
    expand_grid,
    fix_model_axes,
    run_sweep,
    select,
    select_stratified,
    split_by_group,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("subpopdro")

EXIT_PARTIAL = 4
BASELINE = ("erm_pooled", "mean_loss")
DRO_VARIANTS = [v for v in VARIANTS if v != "erm"]


@dataclass
class ExperimentConfig:
    data: dict
    output_dir: str = "out"
    partition_seed: int = 0
    seed: int = 0
    standardize: bool = True
    methods: list = field(default_factory=lambda: ["erm", "dro"])
    grid: dict = field(default_factory=dict)
    dro_grid: dict = field(default_factory=lambda: {"objectives": DRO_VARIANTS})
    stratified_grid: dict = field(default_factory=dict)
    selection_criteria: list = field(default_factory=lambda: ["worst_group_loss", "worst_group_auc"])
    bootstrap: dict = field(default_factory=dict)
    calibration_transform: str = "logit"
    base_dir: str = "."

    def __post_init__(self):
        if "csv" not in self.data and "synthetic" not in self.data:
            raise ConfigError("data needs either a 'csv' path or a 'synthetic' spec")
        bad = set(self.methods) - {"erm", "dro", "stratified"}
        if bad or "erm" not in self.methods:
            raise ConfigError("methods must include 'erm' and may add 'dro', 'stratified'")
        bad = set(self.selection_criteria) - set(CRITERIA)
        if bad:
            raise ConfigError(f"unknown selection criteria {sorted(bad)}")
        if self.calibration_transform not in ("logit", "log"):
            raise ConfigError("calibration_transform must be 'logit' or 'log'")
        # validate eagerly so configuration errors surface before any training
        GridSpec.from_dict(self.grid)
        GridSpec.from_dict(self.dro_grid)
        GridSpec.from_dict(self.stratified_grid)
        self.bootstrap_spec()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no such config file: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            raw = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw.setdefault("base_dir", str(path.parent.resolve()))
        try:
            return cls(**raw)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def bootstrap_spec(self) -> BootstrapSpec:
        try:
            return BootstrapSpec(**self.bootstrap)
        except TypeError as e:
            raise ConfigError(f"bad bootstrap section: {e}") from None

    def synthetic_spec(self) -> SyntheticSpec:
        try:
            return SyntheticSpec(**self.data["synthetic"])
        except TypeError as e:
            raise ConfigError(f"bad synthetic spec: {e}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def load_raw_data(cfg: ExperimentConfig) -> Dataset:
    if "csv" in cfg.data:
        return load_csv(cfg.resolve(cfg.data["csv"]), cfg.data.get("label_col", "label"),
                        cfg.data.get("group_col", "group"))
    return synthesize(cfg.synthetic_spec())


def prepare(cfg: ExperimentConfig) -> tuple[Dataset, Partition]:
    """Load data, then reuse the stored partition or create it; standardise on the training split."""
    ds = load_raw_data(cfg)
    ppath = cfg.out / "partition.json"
    if ppath.exists():
        part = Partition.load(ppath)
        if part.seed != cfg.partition_seed or len(part.train_idx) + len(part.val_idx) + len(part.test_idx) != ds.n:
            raise ConfigError(f"{ppath} does not match this config's data or partition_seed")
    else:
        part = partition(ds, cfg.partition_seed)
    if cfg.standardize:
        ds = standardize(ds, part.train_idx)
    return ds, part


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig) -> int:
    spec = cfg.synthetic_spec()
    ds = synthesize(spec)
    target = cfg.resolve(cfg.data.get("csv", cfg.out / "data.csv"))
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        write_csv(ds, target, cfg.data.get("label_col", "label"), cfg.data.get("group_col", "group"))
        _write(target.with_suffix(".provenance.json"), _dump({"synthetic": spec.to_dict()}))
    except OSError as e:
        raise ConfigError(f"cannot write {target}: {e}") from None
    print(f"wrote {ds.n} rows, {ds.m} features, {ds.k} groups to {target}")
    return 0


def _objective_subset(records: list[RunRecord], variants=None, **fields) -> list[RunRecord]:
    out = []
    for r in records:
        obj = r.config().objective
        if variants is not None and obj.variant not in variants:
            continue
        if all(getattr(obj, k) == v for k, v in fields.items()):
            out.append(r)
    return out


def _pooled_baseline(erm_records: list[RunRecord]) -> Selection:
    pooled = _objective_subset(erm_records, sampler="standard", early_stop="pooled_loss")
    if not pooled:
        raise ConfigError("the ERM grid has no standard-sampler, pooled-loss configs for the baseline")
    return select(pooled, "mean_loss")


def cmd_run(cfg: ExperimentConfig, resume: bool = False, jobs: int = 1) -> int:
    out = cfg.out
    store_dir = out / "store"
    if store_dir.exists() and any((store_dir / "records").glob("*.json")) and not resume:
        raise ConfigError(f"{store_dir} already has records; pass --resume to continue it")
    ds, part = prepare(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", _dump(cfg.to_dict()))
    part.save(out / "partition.json")
    store = RecordStore(store_dir)

    failures = 0
    erm_configs = expand_grid(GridSpec.from_dict({**cfg.grid, "objectives": ["erm"]}), prefix="erm")
    erm_records = run_sweep(ds, part, erm_configs, cfg.seed, store, jobs)
    failures += sum(not r.ok for r in erm_records)

    if "dro" in cfg.methods:
        base = _pooled_baseline(erm_records)
        chosen = base.records[0].config()
        dro_spec = fix_model_axes(GridSpec.from_dict(cfg.dro_grid), chosen.model, chosen.objective.learning_rate)
        dro_configs = expand_grid(dro_spec, prefix="dro")
        dro_records = run_sweep(ds, part, dro_configs, cfg.seed, store, jobs)
        failures += sum(not r.ok for r in dro_records)

    if "stratified" in cfg.methods:
        strat_spec = GridSpec.from_dict({**cfg.stratified_grid, "objectives": ["erm"],
                                         "sampler": ["standard"], "early_stop": ["pooled_loss"]})
        strat_configs = expand_grid(strat_spec, prefix="str")
        strat_records = run_sweep(ds, part, strat_configs, cfg.seed, store, jobs, groups=list(range(ds.k)))
        failures += sum(not r.ok for r in strat_records)

    n = len(store.all())
    print(f"{n} run records in {store_dir} ({failures} failed)")
    return EXIT_PARTIAL if failures else 0


def _selection_doc(family: str, sel: Selection) -> dict:
    return {"family": family, **sel.to_dict()}


def cmd_select(cfg: ExperimentConfig) -> int:
    store = RecordStore(cfg.out / "store")
    records = store.all()
    if not records:
        raise ConfigError(f"no run records under {store.root}; run `subpopdro run` first")
    by_prefix = {"erm": [], "dro": [], "str": []}
    for r in records:
        by_prefix[r.config_id[:3]].append(r)

    sel_dir = cfg.out / "selections"
    docs = {}
    docs[BASELINE] = _selection_doc(BASELINE[0], _pooled_baseline(by_prefix["erm"]))
    for criterion in cfg.selection_criteria:
        docs[("erm", criterion)] = _selection_doc("erm", select(by_prefix["erm"], criterion))
        if by_prefix["dro"]:
            docs[("dro", criterion)] = _selection_doc("dro", select(by_prefix["dro"], criterion))
            for variant in DRO_VARIANTS:
                subset = _objective_subset(by_prefix["dro"], variants={variant})
                if subset:
                    docs[(variant, criterion)] = _selection_doc(variant, select(subset, criterion))
    if by_prefix["str"]:
        per_group = select_stratified(split_by_group(by_prefix["str"]))
        docs[("stratified", "mean_loss")] = {
            "family": "stratified",
            "criterion": "mean_loss",
            "per_group": {str(g): sel.to_dict() for g, sel in per_group.items()},
        }
    for (family, criterion), doc in sorted(docs.items()):
        _write(sel_dir / f"{family}__{criterion}.json", _dump(doc))
        winner = doc.get("winner") or ",".join(s["winner"] for s in doc["per_group"].values())
        print(f"{family:18s} {criterion:18s} -> {winner}")
    return 0


def _models_for(doc: dict, store: RecordStore) -> list:
    """The five fold models of a selection; stratified selections become routing predictors."""
    if "per_group" in doc:
        paths = {int(g): d["model_paths"] for g, d in doc["per_group"].items()}
        n_folds = len(next(iter(paths.values())))
        return [
            CompositePredictor({g: TrainedModel.load(store.root / p[f]) for g, p in paths.items()})
            for f in range(n_folds)
        ]
    return [TrainedModel.load(store.root / p) for p in doc["model_paths"]]


def cmd_evaluate(cfg: ExperimentConfig, jobs: int = 1) -> int:
    sel_dir = cfg.out / "selections"
    base_path = sel_dir / f"{BASELINE[0]}__{BASELINE[1]}.json"
    if not base_path.exists():
        raise ConfigError(f"missing baseline selection {base_path}; run `subpopdro select` first")
    ds, part = prepare(cfg)
    store = RecordStore(cfg.out / "store")
    spec = cfg.bootstrap_spec()
    test = np.asarray(part.test_idx, dtype=np.int64)
    X, y, g = ds.features[test], ds.labels[test], ds.groups[test]

    cache = {}

    def distribution(doc):
        key = json.dumps(doc.get("model_paths") or doc.get("per_group"), sort_keys=True)
        if key not in cache:
            models = _models_for(doc, store)
            cache[key] = bootstrap_distribution(
                models, X, y, g, ds.group_names, spec, transform=cfg.calibration_transform, jobs=jobs
            )
        return cache[key]

    baseline = distribution(json.loads(base_path.read_text()))
    for path in sorted(sel_dir.glob("*.json")):
        doc = json.loads(path.read_text())
        report = metric_report(distribution(doc), spec.alpha, baseline)
        _write(cfg.out / "reports" / f"{path.stem}.json", report.to_json() + "\n")
        _write(cfg.out / "reports" / f"{path.stem}.csv", report.to_csv())
        print(f"wrote report {path.stem}")
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    rep_dir = cfg.out / "reports"
    files = sorted(rep_dir.glob("*.csv"))
    if not files:
        raise ConfigError(f"no reports under {rep_dir}; run `subpopdro evaluate` first")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header_written = False
    lines = []
    for f in files:
        family, criterion = f.stem.split("__")
        rows = list(csv.reader(io.StringIO(f.read_text())))
        if not header_written:
            w.writerow(["family", "criterion", *rows[0]])
            header_written = True
        for row in rows[1:]:
            w.writerow([family, criterion, *row])
            if row[1] == "worst_case":
                lines.append(f"{family:18s} {criterion:18s} worst {row[0]:4s} "
                             f"{_fmt(row[2])} [{_fmt(row[3])}, {_fmt(row[4])}]  "
                             f"rel {_fmt(row[5])} [{_fmt(row[6])}, {_fmt(row[7])}]")
    _write(cfg.out / "summary.csv", buf.getvalue())
    print("\n".join(lines))
    return 0


def _fmt(v: str) -> str:
    return f"{float(v):+.4f}" if v else "   n/a "


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subpopdro", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("synth", "write a synthetic dataset CSV"),
        ("run", "partition the data and run the training sweeps"),
        ("select", "select models from the run store"),
        ("evaluate", "bootstrap test-set reports for every selection"),
        ("report", "stack all reports into summary.csv"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="experiment config (.json or .toml)")
        p.add_argument("--out", help="override the config's output_dir")
        if name == "run":
            p.add_argument("--resume", action="store_true", help="continue an existing store")
        if name in ("run", "evaluate"):
            p.add_argument("--jobs", type=int, default=1, help="worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.out:
            cfg.output_dir = str(Path(args.out).resolve())
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "run":
            return cmd_run(cfg, resume=args.resume, jobs=args.jobs)
        if args.command == "select":
            return cmd_select(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, jobs=args.jobs)
        return cmd_report(cfg)
    except SubpopError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
