import csv
import json

import numpy as np
import pytest

from toor.cli import aggregate, main
from toor.metrics import accuracy_from_predictions

TINY = """
train.max_iter=60
train.pretrain_iter=10
data.u=300
data.id_count=120
data.ood_count=200
data.test_per_class=20
experiment.methods=toor,supervised
experiment.zetas=0,0.5
experiment.seeds=0,1
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_usage_errors_exit_1(tmp_path, config, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["fly", "--out", str(tmp_path)])
    assert exc.value.code == 1
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "x")]) == 1
    assert "single method" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.unknown=1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "y")]) == 1
    assert not (tmp_path / "y").exists()


def test_runtime_failure_exit_2(tmp_path):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(TINY + "data.u=100000\n")
    code = main(["train", "--config", str(cfg), "--method", "toor", "--zeta", "0.5",
                 "--seed", "0", "--out", str(tmp_path / "r")])
    assert code == 2


def test_train_evaluate_metrics(tmp_path, config, capsys):
    out = tmp_path / "run"
    args = ["--config", str(config), "--method", "toor", "--zeta", "0.5", "--seed", "0",
            "--out", str(out)]
    assert main(["train"] + args) == 0
    assert capsys.readouterr().out.strip() == str(out / "report.json")
    for f in ("report.json", "metrics.csv", "checkpoint.bin", "pool.csv", "predictions.csv",
              "histogram.csv", "config.txt"):
        assert (out / f).exists()
    assert main(["evaluate"] + args) == 0
    ev = json.loads((out / "evaluation.json").read_text())
    assert ev["accuracy"] == accuracy_from_predictions(out / "predictions.csv")
    assert ev["n"] == 120
    assert main(["metrics", "--out", str(out)]) == 0
    det = json.loads((out / "detection.json").read_text())
    assert det["n"] == 300 and 0 <= det["auroc"] <= 1


def test_evaluate_missing_checkpoint(tmp_path, config):
    assert main(["evaluate", "--config", str(config), "--zeta", "0", "--seed", "0",
                 "--out", str(tmp_path / "none")]) == 1


def test_gen_data_and_csv_benchmark(tmp_path, config):
    g = tmp_path / "g"
    assert main(["gen-data", "--config", str(config), "--seed", "0", "--zeta", "0.5",
                 "--out", str(g)]) == 0
    for f in ("dataset.csv", "labeled.csv", "unlabeled.csv", "test.csv"):
        assert (g / f).exists()
    ext = tmp_path / "ext.cfg"
    ext.write_text(TINY + f"data.benchmark=csv\ndata.csv={g / 'dataset.csv'}\n")
    out = tmp_path / "r"
    assert main(["train", "--config", str(ext), "--method", "supervised", "--zeta", "0.5",
                 "--seed", "0", "--out", str(out)]) == 0
    assert main(["evaluate", "--config", str(ext), "--zeta", "0.5", "--seed", "0",
                 "--out", str(out), "--data", str(g / "test.csv")]) == 0


def test_sweep_layout_aggregate_and_determinism(tmp_path, config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sweep", "--config", str(config), "--out", str(a)]) == 0
    assert main(["sweep", "--config", str(config), "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    rows = list(csv.DictReader(open(a / "aggregate.csv")))
    assert len(rows) == 4
    for r in rows:
        accs = []
        for seed in (0, 1):
            rd = a / r["method"] / f"zeta={r['zeta']}" / f"seed={seed}"
            rep = json.loads((rd / "report.json").read_text())
            accs.append(rep["summary"]["last_accuracy"])
        assert float(r["mean_accuracy"]) == float(np.mean(accs))
        assert float(r["std_accuracy"]) == float(np.std(accs))


def test_sweep_records_partial_failure(tmp_path, config, monkeypatch):
    import toor.cli as cli
    real = cli.execute_run

    def flaky(cfg, method, zeta, seed, out):
        if method == "toor" and seed == 1:
            raise RuntimeError("boom")
        return real(cfg, method, zeta, seed, out)

    monkeypatch.setattr(cli, "execute_run", flaky)
    out = tmp_path / "s"
    assert main(["sweep", "--config", str(config), "--out", str(out)]) == 0
    assert "boom" in (out / "failures.txt").read_text()
    assert (out / "toor" / "zeta=0" / "seed=1" / "FAILED.txt").exists()
    rows = {(r["method"], r["zeta"]): r for r in csv.DictReader(open(out / "aggregate.csv"))}
    assert rows[("toor", "0")]["n_runs"] == "1" and rows[("supervised", "0")]["n_runs"] == "2"


def test_single_seed_std_zero():
    rows = aggregate({("toor", 0.5): [0.9]})
    assert rows[0]["std_accuracy"] == 0.0 and rows[0]["mean_accuracy"] == 0.9
