"""Unlabeled-data regularizers for the ID exploration term.

Each loss returns the batch-mean value together with gradients for the
extractor and classifier parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ConfigurationError, softmax, softmax_cross_entropy
from .networks import ModelBundle, classify, feature_extract

VARIANTS = ("pi-model", "pseudo-label", "entropy-min")


@dataclass
class SslRegularizer:
    variant: str = "pi-model"
    noise_std: float = 0.15
    threshold: float = 0.95

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown ssl variant {self.variant!r}; choose from {', '.join(VARIANTS)}")


def _softmax_backward(p, grad_p):
    return p * (grad_p - np.sum(grad_p * p, axis=-1, keepdims=True))


def _forward(bundle, X, mode, rng):
    feats, f_tape = feature_extract(bundle, X, mode, rng)
    logits, c_tape = classify(bundle, feats)
    return logits, f_tape, c_tape


def _backward(bundle, f_tape, c_tape, grad_logits):
    g_feat, g_c = bundle.classifier.backward(c_tape, grad_logits)
    _, g_f = bundle.extractor.backward(f_tape, g_feat)
    return g_f, g_c


def _add(a, b):
    return [x + y for x, y in zip(a, b)]


def pi_model_loss(bundle: ModelBundle, X, rng, noise_std: float | None = None):
    """Squared L2 distance between softmax outputs of two noisy passes."""
    noise = bundle.extractor.layers[0]
    saved = noise.std
    if noise_std is not None:
        noise.std = noise_std
    try:
        z1, f1, c1 = _forward(bundle, X, "train", rng)
        z2, f2, c2 = _forward(bundle, X, "train", rng)
    finally:
        noise.std = saved
    p1, p2 = softmax(z1), softmax(z2)
    diff = p1 - p2
    n = len(X)
    loss = float(np.sum(diff ** 2) / n)
    gp = 2.0 * diff / n
    gf1, gc1 = _backward(bundle, f1, c1, _softmax_backward(p1, gp))
    gf2, gc2 = _backward(bundle, f2, c2, _softmax_backward(p2, -gp))
    return loss, _add(gf1, gf2), _add(gc1, gc2)


def pseudo_label_loss(bundle: ModelBundle, X, threshold: float = 0.95):
    """Cross-entropy against the predicted class where its probability
    exceeds ``threshold``; other examples contribute zero."""
    z, ft, ct = _forward(bundle, X, "eval", None)
    p = softmax(z)
    conf = p.max(axis=1) > threshold
    targets = p.argmax(axis=1)
    loss_i, grad = softmax_cross_entropy(z, targets)
    n = len(X)
    loss = float(np.sum(loss_i * conf) / n)
    grad = grad * conf[:, None] / n
    gf, gc = _backward(bundle, ft, ct, grad)
    return loss, gf, gc


def entropy_loss(bundle: ModelBundle, X):
    """Shannon entropy of the softmax prediction."""
    z, ft, ct = _forward(bundle, X, "eval", None)
    p = softmax(z)
    logp = np.log(np.clip(p, 1e-300, None))
    H = -np.sum(p * logp, axis=1)
    n = len(X)
    grad = -p * (logp + H[:, None]) / n
    gf, gc = _backward(bundle, ft, ct, grad)
    return float(H.sum() / n), gf, gc


def ssl_loss(reg: SslRegularizer, bundle: ModelBundle, X, rng):
    """Dispatch on ``reg.variant``.  Returns ``(loss, extractor_grads, classifier_grads)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if reg.variant == "pi-model":
        return pi_model_loss(bundle, X, rng, reg.noise_std)
    if reg.variant == "pseudo-label":
        return pseudo_label_loss(bundle, X, reg.threshold)
    if reg.variant == "entropy-min":
        return entropy_loss(bundle, X)
    raise ConfigurationError(f"unknown ssl variant {reg.variant!r}")
