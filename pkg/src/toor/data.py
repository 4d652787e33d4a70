"""Synthetic class-mismatched mixtures, splits and CSV I/O."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigurationError

ROLES = ("ID", "nearOOD", "farOOD")
CSV_ROLES = ROLES + ("test",)


@dataclass
class Component:
    mean: tuple[float, ...]
    std: float
    role: str
    count: int

    def __post_init__(self):
        self.mean = tuple(float(m) for m in self.mean)
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown role {self.role!r}")
        if self.count < 1:
            raise ConfigurationError("component sample count must be >= 1")
        if self.std < 0:
            raise ConfigurationError("component std must be >= 0")


@dataclass
class MixtureSpec:
    components: list[Component]
    seed: int = 0

    def __post_init__(self):
        dims = {len(c.mean) for c in self.components}
        if len(dims) != 1:
            raise ConfigurationError("all component means must share one dimension")
        if sum(c.role == "ID" for c in self.components) < 2:
            raise ConfigurationError("need at least two ID components")

    @property
    def input_dim(self) -> int:
        return len(self.components[0].mean)

    @property
    def n_classes(self) -> int:
        return sum(c.role == "ID" for c in self.components)


@dataclass
class Dataset:
    """Feature matrix with labels (-1 = none) and evaluation-only roles.

    ``cls`` is the generating component (ID classes are ``0..c-1``; OOD
    components continue the numbering) and is never shown to a trainer.
    """

    X: np.ndarray
    y: np.ndarray
    role: np.ndarray
    cls: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X.reshape(-1, 1)
        self.y = np.asarray(self.y, dtype=int)
        self.role = np.asarray(self.role, dtype=object)
        if self.cls is None:
            self.cls = self.y.copy()
        self.cls = np.asarray(self.cls, dtype=int)

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.role[idx], self.cls[idx])

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.X.shape == other.X.shape
                and np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y)
                and list(self.role) == list(other.role))


def gauss6_4(id_count=500, ood_count=1000, seed=0, radius=3.0, far_radius=12.0,
             std=0.45) -> MixtureSpec:
    """Reference benchmark: six ID classes evenly spaced on a circle, two
    near-OOD classes midway between adjacent ID means on the same circle and
    two far-OOD classes on a wide circle along the other midway directions."""
    comps = []
    for k in range(6):
        a = k * math.pi / 3
        comps.append(Component((radius * math.cos(a), radius * math.sin(a)), std, "ID", id_count))
    for a_deg in (30.0, 210.0):
        a = math.radians(a_deg)
        comps.append(Component((radius * math.cos(a), radius * math.sin(a)), std, "nearOOD",
                               ood_count))
    for a_deg in (150.0, 330.0):
        a = math.radians(a_deg)
        comps.append(Component((far_radius * math.cos(a), far_radius * math.sin(a)), std,
                               "farOOD", ood_count))
    return MixtureSpec(comps, seed)


def generate_mixture(spec: MixtureSpec) -> Dataset:
    """Draw every component; ID components get labels ``0..c-1`` in order."""
    seen = {}
    for c in spec.components:
        if c.std == 0 and c.mean in seen and seen[c.mean] != c.role:
            warnings.warn(f"zero-std components with mean {c.mean} share roles "
                          f"{seen[c.mean]} and {c.role}", stacklevel=2)
        seen.setdefault(c.mean, c.role)
    rng = np.random.default_rng(spec.seed)
    Xs, ys, roles, cls = [], [], [], []
    next_id, next_ood = 0, spec.n_classes
    for c in spec.components:
        Xs.append(np.asarray(c.mean) + c.std * rng.standard_normal((c.count, len(c.mean))))
        if c.role == "ID":
            label, k = next_id, next_id
            next_id += 1
        else:
            label, k = -1, next_ood
            next_ood += 1
        ys.append(np.full(c.count, label))
        cls.append(np.full(c.count, k))
        roles += [c.role] * c.count
    return Dataset(np.concatenate(Xs), np.concatenate(ys), np.array(roles, dtype=object),
                   np.concatenate(cls))


@dataclass
class SplitSpec:
    labeled_per_class: int = 10
    u: int = 2000
    zeta: float = 0.5
    near_fraction: float = 0.5
    test_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.zeta <= 1:
            raise ConfigurationError(f"zeta must lie in [0, 1], got {self.zeta}")
        if not 0 <= self.near_fraction <= 1:
            raise ConfigurationError("near_fraction must lie in [0, 1]")


@dataclass
class Splits:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset
    n_classes: int
    source_index: dict = field(default_factory=dict)

    @property
    def unlabeled_view(self) -> np.ndarray:
        """What a trainer may see of the unlabeled pool: features only."""
        return self.unlabeled.X

    @property
    def truth(self) -> np.ndarray:
        return self.unlabeled.role


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def build_mismatch_split(data: Dataset, split: SplitSpec) -> Splits:
    """Labeled and test sets from ID classes, plus an unlabeled pool with
    ``round(zeta*u)`` OOD examples.  Labeled and test draws do not depend on
    ``zeta`` so that the labeled view is shared across a zeta sweep."""
    classes = np.unique(data.y[data.y >= 0])
    c = len(classes)
    if c < 2:
        raise ConfigurationError("dataset has fewer than two labeled ID classes")
    base = np.random.SeedSequence(split.seed)
    rng_fixed, rng_pool = (np.random.default_rng(s) for s in base.spawn(2))

    # rows already tagged "test" (external CSVs) form the test set as given
    fixed_test = np.flatnonzero(data.role == "test")
    n_test = 0 if len(fixed_test) else split.test_per_class
    labeled_idx, test_idx, rest_id = [], [fixed_test], []
    for k in classes:
        idx = np.flatnonzero((data.y == k) & (data.role == "ID"))
        need = split.labeled_per_class + n_test
        if len(idx) < need:
            raise ConfigurationError(f"class {k}: need {need} examples for labeled+test, "
                                     f"have {len(idx)} (short by {need - len(idx)})")
        idx = rng_fixed.permutation(idx)
        labeled_idx.append(idx[:split.labeled_per_class])
        test_idx.append(idx[split.labeled_per_class:need])
        rest_id.append(idx[need:])
    rest_id = np.sort(np.concatenate(rest_id))

    n_ood = _round_half_up(split.zeta * split.u)
    n_id = split.u - n_ood
    n_near = _round_half_up(split.near_fraction * n_ood)
    n_far = n_ood - n_near
    near = np.flatnonzero(data.role == "nearOOD")
    far = np.flatnonzero(data.role == "farOOD")
    for name, need, have in (("ID", n_id, len(rest_id)), ("nearOOD", n_near, len(near)),
                             ("farOOD", n_far, len(far))):
        if need > have:
            raise ConfigurationError(f"unlabeled pool needs {need} {name} examples, only "
                                     f"{have} available (short by {need - have})")
    parts = [rng_pool.choice(rest_id, n_id, replace=False),
             rng_pool.choice(near, n_near, replace=False),
             rng_pool.choice(far, n_far, replace=False)]
    pool_idx = rng_pool.permutation(np.concatenate(parts)).astype(int)

    labeled_idx = np.concatenate(labeled_idx)
    test_idx = np.concatenate(test_idx).astype(int)
    unlabeled = data.subset(pool_idx)
    unlabeled.y = np.full(len(pool_idx), -1)
    return Splits(data.subset(labeled_idx), unlabeled, data.subset(test_idx), c,
                  {"labeled": labeled_idx, "unlabeled": pool_idx, "test": test_idx})


# -- CSV ---------------------------------------------------------------------

class CsvParseError(ValueError):
    pass


def write_csv(data: Dataset, path, roles=None) -> Path:
    """Write ``f0..f{d-1},label,role``; floats use ``repr`` so they round-trip."""
    path = Path(path)
    roles = data.role if roles is None else roles
    d = data.X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ["label", "role"])
        for x, y, r in zip(data.X, data.y, roles):
            w.writerow([repr(float(v)) for v in x] + ["" if y < 0 else int(y), r])
    return path


def load_csv(path) -> Dataset:
    """Parse a dataset CSV; errors carry ``path:line``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: empty file, missing header") from None
        if len(header) < 3 or header[-2:] != ["label", "role"]:
            raise CsvParseError(f"{path}:1: header must end with label,role")
        d = len(header) - 2
        if header[:d] != [f"f{i}" for i in range(d)]:
            raise CsvParseError(f"{path}:1: feature columns must be named f0..f{d - 1}")
        X, y, role = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise CsvParseError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            try:
                X.append([float(v) for v in row[:d]])
            except ValueError as exc:
                raise CsvParseError(f"{path}:{lineno}: non-numeric feature ({exc})") from None
            lab = row[d].strip()
            try:
                y.append(-1 if lab == "" else int(lab))
            except ValueError:
                raise CsvParseError(f"{path}:{lineno}: label {lab!r} is not an integer") from None
            if row[d + 1] not in CSV_ROLES:
                raise CsvParseError(f"{path}:{lineno}: unknown role {row[d + 1]!r}")
            role.append(row[d + 1])
    X = np.array(X, dtype=np.float64).reshape(len(X), d)
    return Dataset(X, np.array(y, dtype=int), np.array(role, dtype=object))
