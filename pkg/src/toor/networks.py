"""Feature extractor, classifier and discriminator, plus checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (PROB_EPS, AdamState, ConfigurationError, Dropout, GaussianNoise,
                       GradientReversal, LayerStack, LeakyReLU, Linear, ReLU, Sigmoid)

CHECKPOINT_MAGIC = "TOORCKPT1"


@dataclass
class NetworkConfig:
    input_dim: int
    n_classes: int
    feature_dim: int = 16
    hidden: tuple[int, ...] = (32,)
    disc_hidden: int = 64
    dropout: float = 0.5
    negative_slope: float = 0.1
    noise_std: float = 0.15

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        dims = (self.input_dim, self.feature_dim, self.disc_hidden) + self.hidden
        if any(d < 1 for d in dims):
            raise ConfigurationError(f"all network dimensions must be >= 1, got {dims}")
        if self.n_classes < 2:
            raise ConfigurationError(f"need at least 2 known classes, got {self.n_classes}")


def build_extractor(cfg: NetworkConfig, rng) -> LayerStack:
    """Noise -> [Linear -> LeakyReLU] per hidden width -> Linear -> LeakyReLU."""
    layers = [GaussianNoise(cfg.noise_std)]
    prev = cfg.input_dim
    for width in cfg.hidden + (cfg.feature_dim,):
        layers += [Linear(prev, width, rng), LeakyReLU(cfg.negative_slope)]
        prev = width
    return LayerStack(layers)


def build_classifier(cfg: NetworkConfig, rng) -> LayerStack:
    return LayerStack([Linear(cfg.feature_dim, cfg.n_classes, rng)])


def build_discriminator(cfg: NetworkConfig, rng) -> LayerStack:
    h = cfg.disc_hidden
    return LayerStack([
        GradientReversal(0.0),
        Linear(cfg.feature_dim, h, rng), ReLU(), Dropout(cfg.dropout),
        Linear(h, h, rng), ReLU(), Dropout(cfg.dropout),
        Linear(h, 1, rng), Sigmoid(),
    ])


@dataclass
class ModelBundle:
    """The three networks with one Adam state each."""

    config: NetworkConfig
    extractor: LayerStack
    classifier: LayerStack
    discriminator: LayerStack
    adam: dict = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def create(cls, config: NetworkConfig, rng, lr: float = 3e-4, lr_disc: float = 1e-3):
        bundle = cls(config, build_extractor(config, rng), build_classifier(config, rng),
                     build_discriminator(config, rng))
        bundle.adam = {
            "extractor": AdamState.for_params(bundle.extractor.parameters(), lr=lr),
            "classifier": AdamState.for_params(bundle.classifier.parameters(), lr=lr),
            "discriminator": AdamState.for_params(bundle.discriminator.parameters(), lr=lr_disc),
        }
        return bundle

    @property
    def grl(self) -> GradientReversal:
        return self.discriminator.layers[0]

    def stacks(self):
        return {"extractor": self.extractor, "classifier": self.classifier,
                "discriminator": self.discriminator}


def feature_extract(bundle: ModelBundle, x, mode="eval", rng=None):
    """``F(x)``; in train mode the input noise layer is active."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != bundle.config.input_dim:
        raise ConfigurationError(
            f"extractor expects {bundle.config.input_dim} input features, got {x.shape[-1]}")
    return bundle.extractor.forward(x, mode, rng)


def classify(bundle: ModelBundle, feature):
    """Raw logits ``C(F(x))``.  Returns ``(logits, tape)``."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-1] != bundle.config.feature_dim:
        raise ConfigurationError(
            f"classifier expects {bundle.config.feature_dim} features, got {feature.shape[-1]}")
    return bundle.classifier.forward(feature, "eval")


def discriminate(bundle: ModelBundle, feature, flip_coeff: float = 0.0, mode="eval", rng=None):
    """``D(F(x))`` clamped into [1e-7, 1-1e-7].  Returns ``(prob, tape)``.

    ``prob`` has shape ``(n,)`` for a batch and is a float for a single vector.
    """
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-1] != bundle.config.feature_dim:
        raise ConfigurationError(
            f"discriminator expects {bundle.config.feature_dim} features, got {feature.shape[-1]}")
    bundle.grl.coeff = flip_coeff
    out, tape = bundle.discriminator.forward(feature, mode, rng)
    prob = np.clip(out[..., 0], PROB_EPS, 1.0 - PROB_EPS)
    return (float(prob) if prob.ndim == 0 else prob), tape


def predict_logits(bundle: ModelBundle, X) -> np.ndarray:
    feats, _ = feature_extract(bundle, X, "eval")
    logits, _ = classify(bundle, feats)
    return logits


# -- checkpoints -------------------------------------------------------------

def _named_arrays(bundle: ModelBundle):
    arrays = {}
    for name, stack in bundle.stacks().items():
        adam = bundle.adam[name]
        for i, (p, m, v) in enumerate(zip(stack.parameters(), adam.m, adam.v)):
            arrays[f"{name}.param{i}"] = p
            arrays[f"{name}.m{i}"] = m
            arrays[f"{name}.v{i}"] = v
    return arrays


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    """Write a versioned binary checkpoint.

    Layout: the ASCII line ``TOORCKPT1``, one line of JSON metadata (network
    config, Adam hyperparameters and step counters, iteration, array names
    and shapes), then every array as little-endian float64 in the listed order.
    """
    path = Path(path)
    arrays = _named_arrays(bundle)
    meta = {
        "network": asdict(bundle.config),
        "iteration": bundle.iteration,
        "adam": {k: {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t}
                 for k, a in bundle.adam.items()},
        "arrays": [[k, list(a.shape)] for k, a in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode("ascii"))
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (header {magic!r})")
        meta = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    cfg = NetworkConfig(**meta["network"])
    bundle = ModelBundle.create(cfg, np.random.default_rng(0))
    bundle.iteration = meta["iteration"]
    for name, hyper in meta["adam"].items():
        state = bundle.adam[name]
        state.lr, state.beta1, state.beta2, state.eps, state.t = (
            hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["eps"], hyper["t"])
    targets = _named_arrays(bundle)
    offset = 0
    for key, shape in meta["arrays"]:
        n = int(np.prod(shape)) * 8
        if key not in targets or list(targets[key].shape) != shape or offset + n > len(payload):
            raise ValueError(f"{path}: corrupt checkpoint at array {key}")
        targets[key][...] = np.frombuffer(payload, dtype="<f8", count=n // 8,
                                          offset=offset).reshape(shape)
        offset += n
    if offset != len(payload):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return bundle
