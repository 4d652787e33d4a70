import csv
import json
import math

import numpy as np
import pytest

from toor.data import Dataset, SplitSpec, Splits, build_mismatch_split, gauss6_4, generate_mixture
from toor.metrics import accuracy_from_predictions
from toor.networks import ModelBundle, NetworkConfig, load_checkpoint
from toor.trainer import (REPORT_FIELDS, Batches, TrainConfig, Trainer, evaluate, pretrain,
                          rng_streams, run, train_step)


def splits(zeta=0.5, seed=0, u=300):
    data = generate_mixture(gauss6_4(id_count=120, ood_count=200, seed=seed))
    return build_mismatch_split(data, SplitSpec(zeta=zeta, u=u, test_per_class=20, seed=seed))


def cfg(**kw):
    base = dict(max_iter=120, pretrain_iter=20, report_interval=20, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def params(bundle, name):
    return [p.copy() for p in bundle.stacks()[name].parameters()]


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def separable_two_class():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal((-3, 0), 0.5, (100, 2)), rng.normal((3, 0), 0.5, (100, 2))])
    return X, np.repeat([0, 1], 100)


def brute_force_separable(X, y, n_angles=360):
    for a in np.linspace(0, np.pi, n_angles, endpoint=False):
        proj = X @ np.array([np.cos(a), np.sin(a)])
        for sign in (1, -1):
            p = sign * proj
            if p[y == 0].max() < p[y == 1].min():
                return True
    return False


def test_pretrain_zero_iterations_identity():
    b = ModelBundle.create(NetworkConfig(2, 2), np.random.default_rng(0))
    before = params(b, "extractor") + params(b, "classifier")
    pretrain(b, *separable_two_class(), 0, np.random.default_rng(1))
    assert same(before, params(b, "extractor") + params(b, "classifier")) and b.iteration == 0


def test_pretrain_fits_separable_data():
    X, y = separable_two_class()
    assert brute_force_separable(X, y)
    b = ModelBundle.create(NetworkConfig(2, 2), np.random.default_rng(0))
    pretrain(b, X, y, 2000, np.random.default_rng(1))
    assert evaluate(b, X, y) > 0.99


def test_pretrain_deterministic():
    X, y = separable_two_class()
    out = []
    for _ in range(2):
        b = ModelBundle.create(NetworkConfig(2, 2), np.random.default_rng(0))
        pretrain(b, X, y, 50, np.random.default_rng(1))
        out.append(params(b, "extractor") + params(b, "classifier"))
    assert same(*out)


def test_pretrain_needs_labels():
    b = ModelBundle.create(NetworkConfig(2, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        pretrain(b, np.zeros((0, 2)), np.zeros(0, int), 1, np.random.default_rng(0))


def step_pair(lam, gamma, kappa, **kw):
    sp = splits()
    out = []
    for method in ("supervised", "toor"):
        tr = Trainer(cfg(method=method, **kw), sp)
        tr.refresh()
        batches = tr.sample()
        m = train_step(tr.bundle, batches, lam, gamma, kappa, tr.config, tr.streams)
        out.append((tr, m))
    return out


def test_gated_step_equals_supervised_step():
    (sup, _), (toor, _) = step_pair(0.0, 0.0, 0.7)
    for name in ("extractor", "classifier"):
        assert same(params(sup.bundle, name), params(toor.bundle, name))


def test_loss_decomposition():
    _, (tr, m) = step_pair(0.3, 0.8, 0.5)
    total = m["sup_loss"] + 0.3 * m["ssl_loss"] + 0.8 * m["adv_loss"]
    assert abs(m["total_loss"] - total) < 1e-9
    assert m["ssl_loss"] > 0 and m["adv_loss"] > 0


def test_empty_ood_batch_contributes_nothing():
    tr = Trainer(cfg(), splits())
    b = tr.bundle
    d_before = params(b, "discriminator")
    X = tr.splits.labeled.X[:4]
    batches = Batches(X, tr.splits.labeled.y[:4], np.empty((0, 2)), np.empty((0, 2)),
                      np.empty(0))
    m = train_step(b, batches, 1.0, 1.0, 1.0, tr.config, tr.streams)
    assert m["adv_loss"] == 0.0
    assert same(d_before, params(b, "discriminator"))


def test_non_finite_loss_raises():
    tr = Trainer(cfg(), splits())
    tr.bundle.classifier.parameters()[0][...] = np.nan
    tr.refresh = lambda: None
    with pytest.raises(FloatingPointError):
        train_step(tr.bundle, tr.sample(), 1.0, 1.0, 1.0, tr.config, tr.streams)


@pytest.mark.parametrize("method", ["supervised", "pi-model", "pseudo-label"])
def test_discriminator_untouched_without_recycling(method):
    tr = Trainer(cfg(method=method), splits())
    before = params(tr.bundle, "discriminator")
    tr.run()
    assert same(before, params(tr.bundle, "discriminator"))


def test_ssl_never_touches_discriminator():
    t = Trainer(cfg(method="pi-model"), splits())
    t.refresh()
    before = params(t.bundle, "discriminator")
    m = train_step(t.bundle, t.sample(), 10.0, 0.0, 1.0, t.config, t.streams)
    assert m["ssl_loss"] > 0
    assert same(before, params(t.bundle, "discriminator"))


def test_discriminator_moves_only_through_adversarial_term():
    # same batch, with and without the consistency term: D's update is identical
    out = []
    for lam in (0.0, 10.0):
        t = Trainer(cfg(), splits())
        t.refresh()
        train_step(t.bundle, t.sample(), lam, 1.0, 1.0, t.config, t.streams)
        out.append(params(t.bundle, "discriminator"))
    assert same(*out)


def test_gating_reproduces_supervised_trajectory():
    sp = splits()
    sup = run(cfg(method="supervised"), sp).report.records
    gated = run(cfg(method="toor", lambda_max=0.0, gamma_max=0.0), sp).report.records
    for a, b in zip(sup, gated):
        assert a["sup_loss"] == b["sup_loss"] and a["test_accuracy"] == b["test_accuracy"]
    assert len(sup) == len(gated)


def test_gamma_zero_is_no_recycle():
    sp = splits()
    a = run(cfg(method="toor", gamma_max=0.0), sp).report.records
    b = run(cfg(method="toor-no-recycle"), sp).report.records
    assert [r["test_accuracy"] for r in a] == [r["test_accuracy"] for r in b]


def test_supervised_ignores_unlabeled_pool():
    accs = set()
    for zeta in (0.0, 0.75):
        sp = splits(zeta)
        perm = np.random.default_rng(5).permutation(len(sp.unlabeled))
        for pool in (sp.unlabeled, sp.unlabeled.subset(perm)):
            sp2 = Splits(sp.labeled, pool, sp.test, sp.n_classes)
            accs.add(tuple(r["test_accuracy"] for r in run(cfg(method="supervised"),
                                                           sp2).report.records))
    assert len(accs) == 1


def test_degenerate_loop():
    report = run(cfg(max_iter=40, pretrain_iter=40), splits()).report
    assert [r["iteration"] for r in report.records] == [20, 40]
    assert all(r["lambda"] == 0 and r["gamma"] == 0 for r in report.records)


def test_runs_deterministic(tmp_path):
    sp = splits()
    run(cfg(), sp, tmp_path / "a")
    run(cfg(), sp, tmp_path / "b")
    for f in ("metrics.csv", "report.json", "pool.csv", "checkpoint.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_rng_streams_independent():
    a, b = rng_streams(3), rng_streams(3)
    a["noise"].normal(size=100)
    assert a["dropout"].random() == b["dropout"].random()


def test_report_files(tmp_path):
    tr = run(cfg(), splits(), tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == REPORT_FIELDS and len(rows) == len(tr.report.records) + 1
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["summary"]["last_accuracy"] == tr.report.last_accuracy
    assert [r["iteration"] for r in tr.report.records] == [20, 40, 60, 80, 100, 120]
    assert tr.report.records[-1]["kappa"] > 0


def test_refresh_cadence():
    # u=300, half batch 50 -> one refresh every 6 iterations after pretraining
    tr = Trainer(cfg(max_iter=50, pretrain_iter=20), splits())
    tr.run()
    assert tr.refresh_every == 6
    assert tr.pool.refreshes == 1 + len(range(26, 50, 6))


def test_stop_at_truncates_without_changing_schedule():
    sp = splits()
    full = run(cfg(), sp).report.records
    tr = Trainer(cfg(), sp)
    part = tr.run(stop_at=60).records
    assert tr.bundle.iteration == 60
    assert [r["test_accuracy"] for r in part[:2]] == [r["test_accuracy"] for r in full[:2]]


def test_evaluate_perfect_and_constant():
    b = ModelBundle.create(NetworkConfig(2, 6), np.random.default_rng(0))
    for p in b.classifier.parameters():
        p[...] = 0.0
    X = np.random.default_rng(1).normal(size=(60, 2))
    y = np.repeat(np.arange(6), 10)
    assert evaluate(b, X, y) == pytest.approx(1 / 6)
    assert evaluate(b, X, np.zeros(60, int)) == 1.0
    with pytest.raises(ValueError):
        evaluate(b, np.zeros((0, 2)), np.zeros(0, int))


def test_evaluate_matches_prediction_dump_and_checkpoint(tmp_path):
    tr = run(cfg(), splits(), tmp_path)
    acc = evaluate(tr.bundle, tr.splits.test.X, tr.splits.test.y)
    assert accuracy_from_predictions(tmp_path / "predictions.csv") == acc
    back = load_checkpoint(tmp_path / "checkpoint.bin")
    assert evaluate(back, tr.splits.test.X, tr.splits.test.y) == acc


def test_config_method_overrides():
    assert TrainConfig(method="supervised").lambda_max == 0.0
    assert TrainConfig(method="pi-model").gamma_max == 0.0
    assert TrainConfig(method="pseudo-label").ssl.variant == "pseudo-label"
    assert TrainConfig(method="pi-model").lambda_max == 20.0
    assert TrainConfig(method="pseudo-label").lambda_max == 0.3
    assert TrainConfig(method="toor").lambda_max == 1.0
    assert TrainConfig(method="pi-model", lambda_max=2.0).lambda_max == 2.0
    assert TrainConfig(max_iter=20000).pretrain_iter == 200
    with pytest.raises(ValueError):
        TrainConfig(method="mixmatch")
    with pytest.raises(ValueError):
        TrainConfig(max_iter=10, pretrain_iter=20)


def test_empty_test_set_reports_nan():
    sp = splits()
    sp = Splits(sp.labeled, sp.unlabeled, Dataset(np.zeros((0, 2)), [], []), sp.n_classes)
    assert math.isnan(run(cfg(max_iter=30), sp).report.last_accuracy)
