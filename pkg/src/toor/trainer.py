"""Training loop: supervised pretraining, then alternating pool refresh and
joint updates of the supervised, unlabeled-consistency and recycling terms."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adversarial import ScheduleState, adversarial_batch_loss
from .autodiff import ConfigurationError, adam_step, softmax_cross_entropy
from .data import Splits
from .networks import (ModelBundle, NetworkConfig, classify, feature_extract, predict_logits,
                       save_checkpoint)
from .scoring import ScoringConfig, UnlabeledPoolState, refresh_pool, write_pool_dump
from .ssl import SslRegularizer, ssl_loss

log = logging.getLogger(__name__)

METHODS = ("toor", "supervised", "pi-model", "pseudo-label", "toor-no-recycle")

# max consistency coefficient per method; toor ramps its own term to 1
CONSISTENCY_MAX = {"toor": 1.0, "toor-no-recycle": 1.0, "pi-model": 20.0, "pseudo-label": 0.3,
                   "supervised": 0.0}

_STREAMS = {"init": 0, "labeled": 1, "unlabeled": 2, "ood": 3, "noise": 4, "dropout": 5}


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one master seed."""
    return {name: np.random.default_rng(np.random.SeedSequence([seed, code]))
            for name, code in _STREAMS.items()}


@dataclass
class TrainConfig:
    method: str = "toor"
    max_iter: int = 20000
    pretrain_iter: int | None = None
    batch_size: int = 100
    lr: float = 3e-4
    lr_disc: float = 1e-3
    lr_decay: float = 0.2
    lr_decay_frac: float = 0.8
    lambda_frac: float = 0.4
    gamma_frac: float = 0.8
    flip_frac: float = 0.8
    lambda_max: float | None = None
    gamma_max: float = 1.0
    refresh_epochs: float = 1.0
    report_interval: int | None = None
    seed: int = 0
    feature_dim: int = 16
    hidden: tuple[int, ...] = (32,)
    disc_hidden: int = 64
    dropout: float = 0.5
    negative_slope: float = 0.1
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    ssl: SslRegularizer = field(default_factory=SslRegularizer)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.pretrain_iter is None:
            self.pretrain_iter = max(1, round(0.01 * self.max_iter))
        if not 0 <= self.pretrain_iter <= self.max_iter:
            raise ConfigurationError("need 0 <= pretrain_iter <= max_iter")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.report_interval is None:
            self.report_interval = max(1, self.max_iter // 20)
        if self.report_interval < 1:
            raise ConfigurationError("report_interval must be >= 1")
        if self.lambda_max is None:
            self.lambda_max = CONSISTENCY_MAX[self.method]
        if self.lambda_max < 0 or self.gamma_max < 0:
            raise ConfigurationError("term weights must be nonnegative")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.method == "supervised":
            self.lambda_max = self.gamma_max = 0.0
        elif self.method in ("pi-model", "pseudo-label"):
            self.ssl = SslRegularizer(self.method, self.ssl.noise_std, self.ssl.threshold)
            self.gamma_max = 0.0
        elif self.method == "toor-no-recycle":
            self.gamma_max = 0.0

    @property
    def uses_ssl(self) -> bool:
        return self.method != "supervised"

    @property
    def filters_ood(self) -> bool:
        return self.method in ("toor", "toor-no-recycle")

    def network_config(self, input_dim: int, n_classes: int) -> NetworkConfig:
        return NetworkConfig(input_dim, n_classes, self.feature_dim, self.hidden,
                             self.disc_hidden, self.dropout, self.negative_slope,
                             self.ssl.noise_std)

    def schedule(self) -> ScheduleState:
        return ScheduleState.from_fractions(self.max_iter, self.pretrain_iter, self.lambda_frac,
                                            self.gamma_frac, self.flip_frac)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


REPORT_FIELDS = ["iteration", "sup_loss", "ssl_loss", "adv_loss", "lambda", "gamma", "kappa",
                 "n_id", "n_ood", "det_precision", "det_recall", "w_near", "w_far",
                 "test_accuracy"]


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def last_accuracy(self) -> float:
        return self.records[-1]["test_accuracy"] if self.records else math.nan

    @property
    def best_accuracy(self) -> float:
        accs = [r["test_accuracy"] for r in self.records if not math.isnan(r["test_accuracy"])]
        return max(accs) if accs else math.nan

    def summary(self) -> dict:
        return {"best_accuracy": self.best_accuracy, "last_accuracy": self.last_accuracy}

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        payload = {"config": self.config,
                   "records": [{k: clean(r[k]) for k in REPORT_FIELDS} for r in self.records],
                   "summary": {k: clean(v) for k, v in self.summary().items()}}
        return json.dumps(payload, indent=2, sort_keys=True)

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / "report.json", out_dir / "metrics.csv"
        jpath.write_text(self.to_json() + "\n")
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for r in self.records:
                w.writerow([_fmt(r[k]) for k in REPORT_FIELDS])
        return jpath, cpath


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def evaluate(bundle: ModelBundle, X, y) -> float:
    """Fraction of correct argmax predictions (ties go to the lowest class)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pred = np.argmax(predict_logits(bundle, X), axis=1)
    return float(np.mean(pred == y))


def _check_finite(name, value):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {name} loss: {value}")


def _supervised_grads(bundle, X, y):
    feats, ft = feature_extract(bundle, X, "eval")
    logits, ct = classify(bundle, feats)
    loss_i, grad = softmax_cross_entropy(logits, y)
    n = len(y)
    g_feat, g_c = bundle.classifier.backward(ct, grad / n)
    _, g_f = bundle.extractor.backward(ft, g_feat)
    return float(loss_i.mean()), g_f, g_c


def _apply(bundle: ModelBundle, name: str, grads):
    stack = bundle.stacks()[name]
    adam_step(stack.parameters(), grads, bundle.adam[name])
    stack.mark_updated()


def pretrain(bundle: ModelBundle, X_labeled, y_labeled, pretrain_iter: int, rng,
             batch_size: int = 50, on_step=None) -> ModelBundle:
    """Minimize only the supervised cross-entropy for ``pretrain_iter`` steps."""
    if len(y_labeled) == 0:
        raise ConfigurationError("pretraining needs a nonempty labeled set")
    X_labeled = np.asarray(X_labeled, dtype=np.float64)
    y_labeled = np.asarray(y_labeled)
    for _ in range(pretrain_iter):
        idx = rng.integers(0, len(y_labeled), size=batch_size)
        loss, g_f, g_c = _supervised_grads(bundle, X_labeled[idx], y_labeled[idx])
        _check_finite("supervised", loss)
        _apply(bundle, "extractor", g_f)
        _apply(bundle, "classifier", g_c)
        bundle.iteration += 1
        if on_step is not None:
            on_step(loss)
    return bundle


@dataclass
class Batches:
    X_labeled: np.ndarray
    y_labeled: np.ndarray
    X_unlabeled: np.ndarray
    X_ood: np.ndarray
    w_ood: np.ndarray


def train_step(bundle: ModelBundle, batches: Batches, lam: float, gamma: float, kappa: float,
               config: TrainConfig, streams) -> dict:
    """One joint update.

    The extractor and classifier take one Adam step on
    ``CE + lam * L_ssl + gamma * L_adv`` (the adversarial part reaches the
    extractor reversed through the gradient-reversal layer); the
    discriminator takes one Adam step on ``L_adv`` alone.
    """
    sup, g_f, g_c = _supervised_grads(bundle, batches.X_labeled, batches.y_labeled)
    _check_finite("supervised", sup)

    ssl_value = 0.0
    if config.uses_ssl and len(batches.X_unlabeled):
        ssl_value, s_f, s_c = ssl_loss(config.ssl, bundle, batches.X_unlabeled, streams["noise"])
        _check_finite("ssl", ssl_value)
        g_f = [a + lam * b for a, b in zip(g_f, s_f)]
        g_c = [a + lam * b for a, b in zip(g_c, s_c)]

    adv_value, g_d = 0.0, None
    if config.filters_ood:
        adv_value, g_d, a_f = adversarial_batch_loss(
            bundle, batches.X_ood, batches.w_ood, batches.X_unlabeled, kappa, streams["dropout"])
        _check_finite("adversarial", adv_value)
        if a_f is not None:
            g_f = [a + gamma * b for a, b in zip(g_f, a_f)]

    _apply(bundle, "extractor", g_f)
    _apply(bundle, "classifier", g_c)
    if g_d is not None:
        _apply(bundle, "discriminator", g_d)
    bundle.iteration += 1
    return {"sup_loss": sup, "ssl_loss": ssl_value, "adv_loss": adv_value,
            "total_loss": sup + lam * ssl_value + gamma * adv_value}


def _detection_stats(pool: UnlabeledPoolState, truth):
    if pool.size == 0 or truth is None:
        return math.nan, math.nan, math.nan, math.nan
    truth = np.asarray(truth)
    true_id = truth == "ID"
    hit = np.sum(pool.is_id & true_id)
    precision = hit / pool.is_id.sum() if pool.is_id.any() else math.nan
    recall = hit / true_id.sum() if true_id.any() else math.nan
    near, far = truth == "nearOOD", truth == "farOOD"
    w_near = float(pool.weight[near].mean()) if near.any() else math.nan
    w_far = float(pool.weight[far].mean()) if far.any() else math.nan
    return float(precision), float(recall), w_near, w_far


class Trainer:
    """Holds the mutable state of one run."""

    def __init__(self, config: TrainConfig, splits: Splits):
        self.config = config
        self.splits = splits
        self.streams = rng_streams(config.seed)
        d = splits.labeled.X.shape[1]
        self.bundle = ModelBundle.create(config.network_config(d, splits.n_classes),
                                         self.streams["init"], config.lr, config.lr_disc)
        self.pool = UnlabeledPoolState(len(splits.unlabeled), splits.n_classes)
        self.schedule = config.schedule()
        self.report = TrainReport(config=config.to_dict())
        self._acc = {"sup_loss": [], "ssl_loss": [], "adv_loss": []}
        self.half = max(1, config.batch_size // 2)
        u = len(splits.unlabeled)
        self.refresh_every = max(1, round(config.refresh_epochs * u / self.half)) if u else 0

    # -- bookkeeping -----------------------------------------------------
    def _record(self, lam, gamma, kappa):
        precision, recall, w_near, w_far = _detection_stats(self.pool, self.splits.truth)
        means = {k: (float(np.mean(v)) if v else 0.0) for k, v in self._acc.items()}
        test = self.splits.test
        acc = evaluate(self.bundle, test.X, test.y) if len(test) else math.nan
        rec = {"iteration": self.bundle.iteration, **means, "lambda": lam, "gamma": gamma,
               "kappa": kappa, "n_id": int(self.pool.is_id.sum()),
               "n_ood": int((~self.pool.is_id).sum()), "det_precision": precision,
               "det_recall": recall, "w_near": w_near, "w_far": w_far, "test_accuracy": acc}
        self.report.records.append(rec)
        self._acc = {k: [] for k in self._acc}
        log.debug("iter %d acc %.4f |ID| %d", rec["iteration"], acc, rec["n_id"])

    def refresh(self):
        refresh_pool(self.pool, self.bundle, self.splits.unlabeled.X, self.config.scoring)

    def _set_lr(self, iteration):
        cfg = self.config
        factor = cfg.lr_decay if iteration >= cfg.lr_decay_frac * cfg.max_iter else 1.0
        self.bundle.adam["extractor"].lr = cfg.lr * factor
        self.bundle.adam["classifier"].lr = cfg.lr * factor
        self.bundle.adam["discriminator"].lr = cfg.lr_disc * factor

    def sample(self) -> Batches:
        cfg, sp, h = self.config, self.splits, self.half
        lab = sp.labeled
        li = self.streams["labeled"].integers(0, len(lab), size=h)
        X_l, y_l = lab.X[li], lab.y[li]

        d = lab.X.shape[1]
        X_u = np.empty((0, d))
        if cfg.uses_ssl:
            # labeled examples plus either the detected ID subset or the whole pool
            cand = self.pool.id_indices if cfg.filters_ood else np.arange(self.pool.size)
            pick = self.streams["unlabeled"].integers(0, len(lab) + len(cand), size=h)
            from_lab = pick < len(lab)
            X_u = np.empty((h, d))
            X_u[from_lab] = lab.X[pick[from_lab]]
            X_u[~from_lab] = sp.unlabeled.X[cand[pick[~from_lab] - len(lab)]]
        X_o = np.empty((0, d))
        w_o = np.empty(0)
        if cfg.filters_ood:
            ood = self.pool.ood_indices
            if len(ood):
                oi = ood[self.streams["ood"].integers(0, len(ood), size=h)]
                X_o, w_o = sp.unlabeled.X[oi], self.pool.weight[oi]
        return Batches(X_l, y_l, X_u, X_o, w_o)

    # -- main loop ---------------------------------------------------------
    def run(self, out_dir=None, stop_at: int | None = None) -> TrainReport:
        """Pretrain, then train until ``max_iter`` (or ``stop_at``, which
        truncates the run without changing any schedule)."""
        cfg = self.config
        interval = cfg.report_interval
        end = cfg.max_iter if stop_at is None else min(stop_at, cfg.max_iter)
        lab = self.splits.labeled

        def pre_step(loss):
            self._acc["sup_loss"].append(loss)
            self._acc["ssl_loss"].append(0.0)
            self._acc["adv_loss"].append(0.0)
            if self.bundle.iteration % interval == 0 and self.bundle.iteration < end:
                self._record(0.0, 0.0, 0.0)

        for _ in range(min(cfg.pretrain_iter, end)):
            self._set_lr(self.bundle.iteration)
            pretrain(self.bundle, lab.X, lab.y, 1, self.streams["labeled"], self.half, pre_step)
        self.refresh()

        sched = self.schedule
        applied = (0.0, 0.0, 0.0)
        while self.bundle.iteration < end:
            it = self.bundle.iteration
            if self.refresh_every and it > cfg.pretrain_iter \
                    and (it - cfg.pretrain_iter) % self.refresh_every == 0:
                self.refresh()
            sched.at(it)
            applied = (cfg.lambda_max * sched.lam, cfg.gamma_max * sched.gamma, sched.kappa)
            self._set_lr(it)
            m = train_step(self.bundle, self.sample(), *applied, cfg, self.streams)
            for k in self._acc:
                self._acc[k].append(m[k])
            if self.bundle.iteration % interval == 0 and self.bundle.iteration < end:
                self._record(*applied)
        self._record(*applied)
        if out_dir is not None:
            self.write(out_dir)
        return self.report

    def write(self, out_dir):
        out_dir = Path(out_dir)
        self.report.write(out_dir)
        save_checkpoint(self.bundle, out_dir / "checkpoint.bin")
        write_pool_dump(self.pool, self.splits.truth, out_dir / "pool.csv")
        write_predictions(self.bundle, self.splits.test.X, self.splits.test.y,
                          out_dir / "predictions.csv")


def run(config: TrainConfig, splits: Splits, out_dir=None) -> Trainer:
    """Execute a whole run; returns the finished :class:`Trainer`."""
    trainer = Trainer(config, splits)
    trainer.run(out_dir)
    return trainer


def write_predictions(bundle: ModelBundle, X, y, path) -> Path:
    """``index,label,prediction`` for every test example."""
    path = Path(path)
    pred = np.argmax(predict_logits(bundle, X), axis=1) if len(X) else np.empty(0, int)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "prediction"])
        for i, (t, p) in enumerate(zip(y, pred)):
            w.writerow([i, int(t), int(p)])
    return path
