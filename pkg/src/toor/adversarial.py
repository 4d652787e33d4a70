"""Ramp-up schedules and the weighted adversarial loss between detected OOD
examples (target 0) and labeled/ID examples (target 1)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import UsageError, weighted_binary_cross_entropy
from .networks import ModelBundle, discriminate, feature_extract


def lambda_schedule(iteration: float, horizon: float) -> float:
    """``exp(-5 (1 - min(iter/horizon, 1))^2)``."""
    if horizon <= 0:
        raise UsageError("horizon must be positive")
    progress = min(max(iteration, 0) / horizon, 1.0)
    return math.exp(-5.0 * (1.0 - progress) ** 2)


gamma_schedule = lambda_schedule


def flip_coefficient(iteration: float, pretrain_iter: float, scale: float) -> float:
    """``2 / (1 + exp(-10 (iter - pretrain_iter) / scale)) - 1``; 0 before pretraining ends."""
    if scale <= 0:
        raise UsageError("scale must be positive")
    if iteration <= pretrain_iter:
        return 0.0
    return 2.0 / (1.0 + math.exp(-10.0 * (iteration - pretrain_iter) / scale)) - 1.0


@dataclass
class ScheduleState:
    """Iteration counter and current ramp values.  Horizons are absolute
    iteration counts."""

    max_iter: int
    pretrain_iter: int
    lambda_horizon: float
    gamma_horizon: float
    flip_horizon: float
    iteration: int = 0
    lam: float = 0.0
    gamma: float = 0.0
    kappa: float = 0.0

    @classmethod
    def from_fractions(cls, max_iter, pretrain_iter=None, lambda_frac=0.4, gamma_frac=0.8,
                       flip_frac=0.8):
        if pretrain_iter is None:
            pretrain_iter = max(1, round(0.01 * max_iter))
        return cls(max_iter, pretrain_iter, max(lambda_frac * max_iter, 1e-12),
                   max(gamma_frac * max_iter, 1e-12), max(flip_frac * max_iter, 1e-12))

    def at(self, iteration: int) -> "ScheduleState":
        self.iteration = iteration
        self.lam = lambda_schedule(iteration, self.lambda_horizon)
        self.gamma = gamma_schedule(iteration, self.gamma_horizon)
        self.kappa = flip_coefficient(iteration, self.pretrain_iter, self.flip_horizon)
        return self


def adversarial_batch_loss(bundle: ModelBundle, X_ood, w_ood, X_id, kappa: float, rng):
    """Weighted discriminator loss on one OOD and one ID mini-batch.

    ``loss = mean_ood(w * BCE(D(F(x)), 0)) + mean_id(BCE(D(F(x)), 1))``.
    An empty side is skipped.  Returns ``(loss, disc_grads, extractor_grads)``;
    the extractor gradients already carry the ``-kappa`` factor of the
    reversal layer.  ``None`` gradients mean nothing was computed.
    """
    X_ood = np.asarray(X_ood, dtype=np.float64).reshape(-1, bundle.config.input_dim)
    X_id = np.asarray(X_id, dtype=np.float64).reshape(-1, bundle.config.input_dim)
    w_ood = np.asarray(w_ood, dtype=np.float64).reshape(-1)
    n_ood, n_id = len(X_ood), len(X_id)
    if len(w_ood) != n_ood:
        raise UsageError(f"{n_ood} OOD examples but {len(w_ood)} weights")
    if np.any(w_ood < 0):
        raise UsageError("transferability weights must be nonnegative")
    if n_ood + n_id == 0:
        return 0.0, None, None

    X = np.concatenate([X_ood, X_id])
    target = np.concatenate([np.zeros(n_ood), np.ones(n_id)])
    scale = np.concatenate([w_ood / max(n_ood, 1), np.ones(n_id) / max(n_id, 1)])

    feats, f_tape = feature_extract(bundle, X, "eval")
    prob, d_tape = discriminate(bundle, feats, kappa, "train", rng)
    loss_i, grad_p = weighted_binary_cross_entropy(prob, target, scale)
    loss = float(loss_i.sum())
    g_feat, g_disc = bundle.discriminator.backward(d_tape, grad_p[:, None])
    _, g_ext = bundle.extractor.backward(f_tape, g_feat)
    return loss, g_disc, g_ext
