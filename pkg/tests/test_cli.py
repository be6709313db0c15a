import csv
import json

import numpy as np
import pytest

from subpopdro.cli import ExperimentConfig, main
from subpopdro.dataset import load_csv, synthesize, SyntheticSpec
from subpopdro.errors import ConfigError

SYNTH = {
    "group_proportions": [0.6, 0.4],
    "means": [[0.0, 0.0], [0.5, -0.5]],
    "coefs": [[1.0, -1.0], [0.8, -0.6]],
    "intercepts": [0.0, -0.3],
    "n": 800,
    "seed": 3,
}
ONE_POINT = {
    "learning_rate": [0.01], "hidden_layers": [0], "weight_decay": [0.0], "sampler": ["standard"],
    "early_stop": ["pooled_loss"], "max_iterations": 2, "minibatches_per_iteration": 3,
    "batch_size": 32, "patience": 2,
}


def write_config(tmp_path, name="exp.json", **overrides):
    cfg = {
        "data": {"synthetic": SYNTH},
        "output_dir": "out",
        "methods": ["erm"],
        "grid": ONE_POINT,
        "selection_criteria": ["mean_loss", "worst_group_loss"],
        "bootstrap": {"B": 20, "seed": 1},
    }
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_synth_writes_csv_and_provenance(tmp_path, capsys):
    path = write_config(tmp_path, data={"synthetic": SYNTH, "csv": "data/d.csv"})
    assert main(["synth", "--config", str(path)]) == 0
    ds = load_csv(tmp_path / "data" / "d.csv", "label", "group")
    ref = synthesize(SyntheticSpec(**SYNTH))
    assert np.array_equal(ds.labels, ref.labels)
    np.testing.assert_allclose(ds.features, ref.features, rtol=1e-15)
    prov = json.loads((tmp_path / "data" / "d.provenance.json").read_text())
    assert prov["synthetic"]["seed"] == 3
    assert "800 rows" in capsys.readouterr().out


def test_run_one_config_gives_five_models_and_records(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", "--config", str(path)]) == 0
    store = tmp_path / "out" / "store"
    assert len(list((store / "models").glob("*.json"))) == 5
    assert len(list((store / "records").glob("*.json"))) == 5
    saved = json.loads((tmp_path / "out" / "config.json").read_text())
    assert saved["seed"] == 0 and saved["partition_seed"] == 0


def test_rerun_requires_resume_and_skips_finished(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", "--config", str(path)]) == 0
    assert main(["run", "--config", str(path)]) == 1
    records = tmp_path / "out" / "store" / "records"
    victim = sorted(records.glob("*.json"))[-1]
    victim.unlink()
    stamps = {p.name: p.stat().st_mtime_ns for p in records.glob("*.json")}
    assert main(["run", "--config", str(path), "--resume"]) == 0
    assert victim.exists()
    assert all(records.joinpath(n).stat().st_mtime_ns == t for n, t in stamps.items())


def test_select_evaluate_report(tmp_path):
    path = write_config(tmp_path)
    for cmd in ("run", "select", "evaluate", "report"):
        assert main([cmd, "--config", str(path)]) == 0, cmd
    out = tmp_path / "out"
    sels = {p.stem: json.loads(p.read_text()) for p in (out / "selections").glob("*.json")}
    assert set(sels) == {"erm_pooled__mean_loss", "erm__mean_loss", "erm__worst_group_loss"}
    assert len({s["winner"] for s in sels.values()}) == 1
    reports = {p.stem: p.read_text() for p in (out / "reports").glob("*.csv")}
    assert reports["erm__mean_loss"] == reports["erm__worst_group_loss"]
    rows = list(csv.DictReader(reports["erm_pooled__mean_loss"].splitlines()))
    assert len(rows) == 3 * (2 + 2)
    for row in rows:
        if row["relative_lower"] != "":
            assert float(row["relative_lower"]) == 0.0 and float(row["relative_upper"]) == 0.0
    summary = list(csv.reader((out / "summary.csv").read_text().splitlines()))
    assert len(summary) == 1 + 3 * 12


def test_evaluate_without_baseline_is_config_error(tmp_path):
    path = write_config(tmp_path)
    assert main(["evaluate", "--config", str(path)]) == 1


def test_select_without_store_is_config_error(tmp_path):
    assert main(["select", "--config", str(write_config(tmp_path))]) == 1


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {"synthetic": SYNTH}, "methods": ["dro"]}))
    assert main(["run", "--config", str(bad)]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    with pytest.raises(ConfigError):
        ExperimentConfig(data={"synthetic": SYNTH}, grid={"learning_rates": [1]})


def test_csv_errors_exit_codes(tmp_path):
    assert main(["run", "--config", str(write_config(tmp_path, data={"csv": "nope.csv"}))]) == 1
    (tmp_path / "bad.csv").write_text("x,label,group\n0.1,1,a\nfoo,0,b\n")
    assert main(["run", "--config", str(write_config(tmp_path, "b.json", data={"csv": "bad.csv"}))]) == 2


def test_partial_failure_exit_code(tmp_path):
    # a group with a single class makes every stratified run fail
    spec = dict(SYNTH, intercepts=[0.0, 40.0])
    path = write_config(tmp_path, data={"synthetic": spec}, methods=["erm", "stratified"],
                        stratified_grid=ONE_POINT)
    assert main(["run", "--config", str(path)]) == 4


def test_toml_config_and_out_override(tmp_path):
    toml = tmp_path / "exp.toml"
    toml.write_text(
        'methods = ["erm"]\noutput_dir = "ignored"\n'
        "[data.synthetic]\n"
        "group_proportions = [0.6, 0.4]\nmeans = [[0.0, 0.0], [0.5, -0.5]]\n"
        "coefs = [[1.0, -1.0], [0.8, -0.6]]\nintercepts = [0.0, -0.3]\nn = 800\nseed = 3\n"
        "[grid]\nlearning_rate = [0.01]\nhidden_layers = [0]\nweight_decay = [0.0]\n"
        'sampler = ["standard"]\nearly_stop = ["pooled_loss"]\nmax_iterations = 1\n'
        "minibatches_per_iteration = 2\nbatch_size = 16\npatience = 1\n"
    )
    target = tmp_path / "elsewhere"
    assert main(["run", "--config", str(toml), "--out", str(target)]) == 0
    assert (target / "partition.json").exists()
    assert not (tmp_path / "ignored").exists()
