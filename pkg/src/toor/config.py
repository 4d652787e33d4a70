"""Experiment configuration: flat ``section.key=value`` text files.

Blank lines and ``#`` comments are ignored.  Every key must be known;
values are validated before any computation starts.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import SplitSpec
from .scoring import ScoringConfig
from .ssl import SslRegularizer
from .trainer import METHODS, TrainConfig


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _opt_int(text):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


# key -> (converter, default)
SCHEMA = {
    "data.benchmark": (str, "gauss6+4"),
    "data.csv": (str, ""),
    "data.id_count": (int, 500),
    "data.ood_count": (int, 1000),
    "data.labeled_per_class": (int, 10),
    "data.u": (int, 2000),
    "data.zeta": (float, 0.5),
    "data.near_fraction": (float, 0.5),
    "data.test_per_class": (int, 100),
    "train.max_iter": (int, 20000),
    "train.pretrain_iter": (_opt_int, None),
    "train.batch_size": (int, 100),
    "train.lr": (float, 3e-4),
    "train.lr_disc": (float, 1e-3),
    "train.lr_decay": (float, 0.2),
    "train.lr_decay_frac": (float, 0.8),
    "train.lambda_frac": (float, 0.4),
    "train.gamma_frac": (float, 0.8),
    "train.flip_frac": (float, 0.8),
    "train.lambda_max": (_opt_float, None),
    "train.gamma_max": (float, 1.0),
    "train.refresh_epochs": (float, 1.0),
    "train.report_interval": (_opt_int, None),
    "network.feature_dim": (int, 16),
    "network.hidden": (_ints, (32,)),
    "network.disc_hidden": (int, 64),
    "network.dropout": (float, 0.5),
    "network.negative_slope": (float, 0.1),
    "scoring.tau": (float, 0.8),
    "scoring.delta": (float, 0.9),
    "scoring.eta": (float, 0.6),
    "ssl.variant": (str, "pi-model"),
    "ssl.noise_std": (float, 0.15),
    "ssl.threshold": (float, 0.95),
    "experiment.methods": (_names, ("toor",)),
    "experiment.zetas": (_floats, ()),
    "experiment.seeds": (_ints, (0,)),
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    @property
    def methods(self) -> tuple[str, ...]:
        return self.values["experiment.methods"]

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["experiment.seeds"]

    @property
    def zetas(self) -> tuple[float, ...]:
        return self.values["experiment.zetas"] or (self.values["data.zeta"],)

    def override(self, **kv) -> "ExperimentConfig":
        values = dict(self.values)
        for key, value in kv.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = value
        cfg = replace(self, values=values)
        cfg.validate()
        return cfg

    def split_spec(self, zeta: float, seed: int) -> SplitSpec:
        v = self.values
        return SplitSpec(v["data.labeled_per_class"], v["data.u"], zeta,
                         v["data.near_fraction"], v["data.test_per_class"], seed)

    def train_config(self, method: str, seed: int) -> TrainConfig:
        v = self.values
        return TrainConfig(
            method=method, seed=seed, max_iter=v["train.max_iter"],
            pretrain_iter=v["train.pretrain_iter"], batch_size=v["train.batch_size"],
            lr=v["train.lr"], lr_disc=v["train.lr_disc"], lr_decay=v["train.lr_decay"],
            lr_decay_frac=v["train.lr_decay_frac"], lambda_frac=v["train.lambda_frac"],
            gamma_frac=v["train.gamma_frac"], flip_frac=v["train.flip_frac"],
            lambda_max=v["train.lambda_max"], gamma_max=v["train.gamma_max"],
            refresh_epochs=v["train.refresh_epochs"],
            report_interval=v["train.report_interval"],
            feature_dim=v["network.feature_dim"], hidden=v["network.hidden"],
            disc_hidden=v["network.disc_hidden"], dropout=v["network.dropout"],
            negative_slope=v["network.negative_slope"],
            scoring=ScoringConfig(v["scoring.tau"], v["scoring.delta"], v["scoring.eta"]),
            ssl=SslRegularizer(v["ssl.variant"], v["ssl.noise_std"], v["ssl.threshold"]),
        )

    def validate(self):
        v = self.values
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if v["data.benchmark"] not in ("gauss6+4", "csv"):
            raise ConfigError(f"unknown benchmark {v['data.benchmark']!r}")
        if v["data.benchmark"] == "csv" and not v["data.csv"]:
            raise ConfigError("data.benchmark=csv needs data.csv=PATH")
        if not self.seeds:
            raise ConfigError("experiment.seeds is empty")
        try:
            for z in self.zetas:
                self.split_spec(z, 0)
            for m in self.methods:
                self.train_config(m, 0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        lines = []
        for key, value in self.values.items():
            if isinstance(value, tuple):
                value = ",".join(str(x) for x in value)
            lines.append(f"{key}={'' if value is None else value}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg = ExperimentConfig(values)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
