"""Temperature-scaled scores, temporal ensembling, ID/OOD detection and
transferability weights for the unlabeled pool."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import UsageError, softmax
from .networks import ModelBundle, classify, discriminate, feature_extract

ID, OOD = "ID", "OOD"


@dataclass
class ScoringConfig:
    tau: float = 0.8
    delta: float = 0.9
    eta: float = 0.6

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not 0 < self.delta < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.delta}")
        if not 0 <= self.eta <= 1:
            raise ValueError(f"EMA momentum must lie in [0, 1], got {self.eta}")


@dataclass
class UnlabeledPoolState:
    """Per-example state for the unlabeled pool.

    ``assembled`` rows are NaN until the first refresh.  ``is_id`` holds the
    current partition (True = ID).
    """

    size: int
    n_classes: int
    assembled: np.ndarray = field(init=False)
    score: np.ndarray = field(init=False)
    is_id: np.ndarray = field(init=False)
    w_domain: np.ndarray = field(init=False)
    w_class: np.ndarray = field(init=False)
    weight: np.ndarray = field(init=False)
    refreshes: int = 0

    def __post_init__(self):
        u, c = self.size, self.n_classes
        self.assembled = np.full((u, c), np.nan)
        self.score = np.zeros(u)
        self.is_id = np.zeros(u, dtype=bool)
        self.w_domain = np.ones(u)
        self.w_class = np.ones(u)
        self.weight = np.ones(u)

    @property
    def id_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_id)

    @property
    def ood_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_id)

    def tags(self) -> list[str]:
        return [ID if t else OOD for t in self.is_id]


def scaled_prediction(logits, tau: float = 0.8) -> np.ndarray:
    """Softmax of ``logits / tau`` (row-wise for a batch)."""
    if not tau > 0:
        raise UsageError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    if logits.shape[-1] < 2:
        raise UsageError("need at least two classes")
    return softmax(logits, tau)


def softmax_score(S) -> np.ndarray | float:
    """Largest class probability."""
    s = np.max(np.asarray(S, dtype=np.float64), axis=-1)
    return float(s) if s.ndim == 0 else s


def ema_update(old, new, eta: float) -> np.ndarray:
    """``eta * old + (1 - eta) * new``; rows of ``old`` that are unset (None or
    NaN) take ``new`` directly."""
    new = np.asarray(new, dtype=np.float64)
    if old is None:
        return new.copy()
    old = np.asarray(old, dtype=np.float64)
    if old.shape != new.shape:
        raise UsageError(f"shape mismatch: {old.shape} vs {new.shape}")
    out = eta * old + (1.0 - eta) * new
    unset = np.isnan(old).any(axis=-1)
    if np.any(unset):
        out[unset] = new[unset]
    return out


def detect(score, delta: float):
    """True (ID) where ``score > delta`` strictly, else False (OOD)."""
    t = np.asarray(score) > delta
    return bool(t) if t.ndim == 0 else t


def _mean_normalize(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw.copy()
    mean = raw.mean()
    # constant input maps to exactly 1
    if mean <= 0 or np.all(raw == raw.flat[0]):
        return np.ones_like(raw)
    return raw / mean


def domain_similarity_scores(disc_outputs) -> np.ndarray:
    """Discriminator outputs divided by their mean over the whole pool."""
    return _mean_normalize(disc_outputs)


def prediction_margin(S) -> np.ndarray:
    """Top-1 minus top-2 probability (0 for a tied maximum)."""
    S = np.asarray(S, dtype=np.float64)
    if S.shape[-1] < 2:
        raise UsageError("need at least two classes")
    top2 = np.sort(S, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]


def class_tendency_scores(assembled) -> np.ndarray:
    """Prediction margins divided by their mean over the whole pool."""
    return _mean_normalize(prediction_margin(np.atleast_2d(assembled)))


def blend_coefficient(w_domain, w_class) -> float:
    """Share of the domain score: var(w_d) / (var(w_d) + var(w_c))."""
    vd = float(np.var(w_domain)) if len(w_domain) else 0.0
    vc = float(np.var(w_class)) if len(w_class) else 0.0
    if vd + vc == 0.0:
        return 0.5
    return vd / (vd + vc)


def transferability(w_domain, w_class) -> np.ndarray:
    """Variance-weighted convex combination of the two scores."""
    w_domain = np.asarray(w_domain, dtype=np.float64)
    w_class = np.asarray(w_class, dtype=np.float64)
    if w_domain.shape != w_class.shape or w_domain.size == 0:
        raise UsageError("score vectors must be nonempty and of equal length")
    alpha = blend_coefficient(w_domain, w_class)
    return alpha * w_domain + (1.0 - alpha) * w_class


def refresh_pool(pool: UnlabeledPoolState, bundle: ModelBundle, X_unlabeled,
                 config: ScoringConfig) -> UnlabeledPoolState:
    """Recompute ensembled predictions, partition and weights for every
    unlabeled example.  All network passes run in eval mode; the blend
    coefficient is estimated on the current OOD subset and applied to the
    whole pool."""
    if pool.size == 0:
        pool.refreshes += 1
        return pool
    X_unlabeled = np.asarray(X_unlabeled, dtype=np.float64)
    if len(X_unlabeled) != pool.size:
        raise UsageError(f"pool holds {pool.size} examples, got {len(X_unlabeled)}")
    feats, _ = feature_extract(bundle, X_unlabeled, "eval")
    logits, _ = classify(bundle, feats)
    S = scaled_prediction(logits, config.tau)
    assembled = ema_update(pool.assembled, S, config.eta)
    score = softmax_score(assembled)
    is_id = detect(score, config.delta)

    raw_domain, _ = discriminate(bundle, feats, bundle.grl.coeff, "eval")
    w_domain = domain_similarity_scores(raw_domain)
    w_class = class_tendency_scores(assembled)
    ood = ~is_id
    alpha = blend_coefficient(w_domain[ood], w_class[ood]) if ood.any() else 0.5
    weight = alpha * w_domain + (1.0 - alpha) * w_class

    # single commit
    pool.assembled, pool.score, pool.is_id = assembled, score, is_id
    pool.w_domain, pool.w_class, pool.weight = w_domain, w_class, weight
    pool.refreshes += 1
    return pool


POOL_COLUMNS = ["index", "score", "tag", "w_d", "w_c", "w", "truth"]


def write_pool_dump(pool: UnlabeledPoolState, truth, path) -> Path:
    """One CSV row per unlabeled example."""
    path = Path(path)
    truth = list(truth) if truth is not None else [""] * pool.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POOL_COLUMNS)
        for i in range(pool.size):
            w.writerow([i, repr(float(pool.score[i])), ID if pool.is_id[i] else OOD,
                        repr(float(pool.w_domain[i])), repr(float(pool.w_class[i])),
                        repr(float(pool.weight[i])), truth[i]])
    return path


def read_pool_dump(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "index": np.array([int(r["index"]) for r in rows], dtype=int),
        "score": np.array([float(r["score"]) for r in rows]),
        "tag": np.array([r["tag"] for r in rows]),
        "w_d": np.array([float(r["w_d"]) for r in rows]),
        "w_c": np.array([float(r["w_c"]) for r in rows]),
        "w": np.array([float(r["w"]) for r in rows]),
        "truth": np.array([r["truth"] for r in rows]),
    }
