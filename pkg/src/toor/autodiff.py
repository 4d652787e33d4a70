"""Small reverse-mode layer stack used by the feature extractor, classifier
and discriminator.

Everything works on batches: arrays of shape ``(n, features)``.  A 1-d input
is treated as a batch of one and the output is squeezed back.  Activations
are cached on a :class:`Tape` returned by :meth:`LayerStack.forward`, never on
the layers themselves, so several forward passes may be in flight at once.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-7

_stack_ids = itertools.count()


class ConfigurationError(ValueError):
    """Raised for shape or hyperparameter mismatches in a network definition."""


class UsageError(ValueError):
    """Raised when an operation is called with invalid arguments or state."""


class Layer:
    """Base layer.  Subclasses implement ``_forward`` and ``_backward``."""

    in_dim: int | None = None
    out_dim: int | None = None

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def _forward(self, x, train, rng):
        raise NotImplementedError

    def _backward(self, cache, grad_out):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Linear(Layer):
    """Affine map ``x @ W + b`` with Glorot-uniform weights and zero bias."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise ConfigurationError(f"Linear dimensions must be >= 1, got {in_dim}->{out_dim}")
        self.in_dim, self.out_dim = in_dim, out_dim
        rng = np.random.default_rng() if rng is None else rng
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.params = {
            "W": rng.uniform(-limit, limit, size=(in_dim, out_dim)),
            "b": np.zeros(out_dim),
        }

    def _forward(self, x, train, rng):
        return x @ self.params["W"] + self.params["b"], x

    def _backward(self, x, grad_out):
        grads = {"W": x.T @ grad_out, "b": grad_out.sum(axis=0)}
        return grad_out @ self.params["W"].T, grads

    def __repr__(self):
        return f"Linear({self.in_dim}->{self.out_dim})"


class ReLU(Layer):
    def _forward(self, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def _backward(self, mask, grad_out):
        return grad_out * mask, {}


class LeakyReLU(Layer):
    def __init__(self, negative_slope: float = 0.1):
        super().__init__()
        self.negative_slope = negative_slope

    def _forward(self, x, train, rng):
        scale = np.where(x > 0, 1.0, self.negative_slope)
        return x * scale, scale

    def _backward(self, scale, grad_out):
        return grad_out * scale, {}

    def __repr__(self):
        return f"LeakyReLU({self.negative_slope})"


class Sigmoid(Layer):
    def _forward(self, x, train, rng):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, out

    def _backward(self, out, grad_out):
        return grad_out * out * (1.0 - out), {}


class Softmax(Layer):
    """Row-wise softmax with max subtraction."""

    def _forward(self, x, train, rng):
        out = softmax(x)
        return out, out

    def _backward(self, p, grad_out):
        dot = np.sum(grad_out * p, axis=-1, keepdims=True)
        return p * (grad_out - dot), {}


class Dropout(Layer):
    """Inverted dropout: scaled by ``1/(1-p)`` in train mode, identity at eval."""

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def _forward(self, x, train, rng):
        if not train or self.p == 0.0:
            return x, None
        if rng is None:
            raise UsageError("Dropout in train mode needs an rng")
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * mask, mask

    def _backward(self, mask, grad_out):
        return (grad_out if mask is None else grad_out * mask), {}

    def __repr__(self):
        return f"Dropout({self.p})"


class GaussianNoise(Layer):
    """Additive isotropic noise, active only in train mode."""

    def __init__(self, std: float = 0.15):
        super().__init__()
        if std < 0:
            raise ConfigurationError(f"noise std must be >= 0, got {std}")
        self.std = std

    def _forward(self, x, train, rng):
        if not train or self.std == 0.0:
            return x, None
        if rng is None:
            raise UsageError("GaussianNoise in train mode needs an rng")
        return x + rng.normal(0.0, self.std, size=x.shape), None

    def _backward(self, cache, grad_out):
        return grad_out, {}

    def __repr__(self):
        return f"GaussianNoise({self.std})"


class GradientReversal(Layer):
    """Identity forward; multiplies the incoming gradient by ``-coeff``.

    ``coeff`` is the flip coefficient and is set from outside each iteration.
    """

    def __init__(self, coeff: float = 1.0):
        super().__init__()
        self.coeff = coeff

    @property
    def coeff(self) -> float:
        return self._coeff

    @coeff.setter
    def coeff(self, value: float):
        if value < 0:
            raise UsageError(f"flip coefficient must be >= 0, got {value}")
        self._coeff = float(value)

    def _forward(self, x, train, rng):
        return x, None

    def _backward(self, cache, grad_out):
        return -self._coeff * grad_out, {}

    def __repr__(self):
        return f"GradientReversal(coeff={self._coeff})"


@dataclass
class Tape:
    """Cached activations from one forward call."""

    stack_id: int
    version: int
    caches: list
    squeeze: bool


class LayerStack:
    """Ordered sequence of layers; the empty stack is the identity."""

    def __init__(self, layers: Sequence[Layer] = ()):
        self.layers = list(layers)
        self._id = next(_stack_ids)
        self.version = 0
        prev = None
        for i, layer in enumerate(self.layers):
            if layer.in_dim is not None:
                if prev is not None and prev != layer.in_dim:
                    raise ConfigurationError(
                        f"layer {i} ({layer!r}) expects {layer.in_dim} inputs, "
                        f"previous layer produces {prev}")
                prev = layer.out_dim

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return "LayerStack([" + ", ".join(map(repr, self.layers)) + "])"

    @property
    def in_dim(self) -> int | None:
        for layer in self.layers:
            if layer.in_dim is not None:
                return layer.in_dim
        return None

    @property
    def out_dim(self) -> int | None:
        for layer in reversed(self.layers):
            if layer.out_dim is not None:
                return layer.out_dim
        return None

    def parameters(self) -> list[np.ndarray]:
        """Flat list of parameter arrays, in layer order."""
        return [p for layer in self.layers for _, p in sorted(layer.params.items())]

    def mark_updated(self):
        """Invalidate outstanding tapes after parameters were changed."""
        self.version += 1

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None):
        """Run the stack.  Returns ``(output, tape)``."""
        if mode not in ("train", "eval"):
            raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2:
            raise UsageError(f"input must be 1-d or 2-d, got shape {x.shape}")
        train = mode == "train"
        caches = []
        for i, layer in enumerate(self.layers):
            if layer.in_dim is not None and x.shape[1] != layer.in_dim:
                raise ConfigurationError(
                    f"layer {i} ({layer!r}) expects {layer.in_dim} inputs, got {x.shape[1]}")
            x, cache = layer._forward(x, train, rng)
            caches.append(cache)
        tape = Tape(self._id, self.version, caches, squeeze)
        return (x[0] if squeeze else x), tape

    def backward(self, tape: Tape, grad_out):
        """Backpropagate ``grad_out``.

        Returns ``(input_gradient, parameter_gradients)`` where the parameter
        gradients line up with :meth:`parameters`.
        """
        if not isinstance(tape, Tape) or tape.stack_id != self._id:
            raise UsageError("tape was not produced by this stack")
        if tape.version != self.version:
            raise UsageError("stale tape: parameters changed since the forward pass")
        g = np.asarray(grad_out, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        per_layer = []
        for layer, cache in zip(reversed(self.layers), reversed(tape.caches)):
            g, grads = layer._backward(cache, g)
            per_layer.append([grads[k] for k in sorted(grads)])
        param_grads = [gp for grads in reversed(per_layer) for gp in grads]
        return (g[0] if tape.squeeze else g), param_grads


def softmax(z, temperature: float = 1.0):
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Cross-entropy of softmax(logits) against integer labels.

    Returns ``(loss, grad)``; for a batch both are per-example (the gradient
    row ``i`` is the derivative of ``loss[i]`` with respect to ``logits[i]``).
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels))
    n, c = z.shape
    if c < 2:
        raise UsageError(f"need at least 2 classes, got {c}")
    if y.shape != (n,):
        raise UsageError(f"expected {n} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= c):
        raise UsageError(f"label out of range [0, {c})")
    y = y.astype(np.intp)
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = logsumexp - shifted[np.arange(n), y]
    grad = np.exp(shifted - logsumexp[:, None])
    grad[np.arange(n), y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def weighted_binary_cross_entropy(prob, target, weight=1.0):
    """``-weight * [t log p + (1-t) log(1-p)]`` with p clamped to [1e-7, 1-1e-7].

    Returns ``(loss, d loss / d prob)`` elementwise.
    """
    weight = np.asarray(weight, dtype=np.float64)
    if np.any(weight < 0):
        raise UsageError("weights must be nonnegative")
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(target, dtype=np.float64)
    loss = -weight * (t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    grad = -weight * (t / p - (1.0 - t) / (1.0 - p))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one parameter list."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied in place.  Returns ``(params, state)``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise UsageError("params, grads and Adam buffers differ in length")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise UsageError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params, state


def finite_difference_check(stack: LayerStack, x, loss_fn: Callable, step: float = 1e-4,
                            mode: str = "eval", seed: int = 0, floor: float = 1e-3) -> float:
    """Worst relative error between backprop and central differences.

    ``loss_fn(output) -> (loss, d loss / d output)``.  Stochastic layers are
    replayed from ``seed`` on every evaluation.  Gradients of parameters (and
    of the input) that sit upstream of gradient-reversal layers are compared
    against the finite difference times the product of ``-coeff`` over those
    layers, since reversal leaves the forward map untouched.  The relative
    error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise UsageError("step must be positive")
    x = np.array(x, dtype=np.float64)

    def loss_at(inp):
        out, _ = stack.forward(inp, mode, np.random.default_rng(seed))
        value = float(loss_fn(out)[0])
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} during finite-difference check")
        return value

    out, tape = stack.forward(x, mode, np.random.default_rng(seed))
    loss, g_out = loss_fn(out)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} during finite-difference check")
    g_in, g_params = stack.backward(tape, g_out)

    # product of reversal factors strictly downstream of each layer
    factors = []
    f = 1.0
    for layer in reversed(stack.layers):
        factors.append(f)
        if isinstance(layer, GradientReversal):
            f *= -layer.coeff
    factors.reverse()
    input_factor = f

    worst = 0.0

    def compare(analytic, numeric):
        nonlocal worst
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)

    param_factors = [factors[i] for i, layer in enumerate(stack.layers) for _ in layer.params]
    for p, g, fac in zip(stack.parameters(), g_params, param_factors):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss_at(x)
            p[idx] = orig - step
            down = loss_at(x)
            p[idx] = orig
            compare(g[idx], fac * (up - down) / (2 * step))
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        up = loss_at(x)
        x[idx] = orig - step
        down = loss_at(x)
        x[idx] = orig
        compare(g_in[idx], input_factor * (up - down) / (2 * step))
    return worst
