# adamw_ema/data.py
"""
Seeded synthetic tasks: Gaussian-mixture classification and teacher-student
regression. Minibatch order comes from a shuffle seed that is separate from
both the data seed and the init seed.
"""
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from adamw_ema.ema import iterations_per_epoch
from adamw_ema.errors import ConfigError

TASKS = ("gaussian-mixture", "teacher-student")

# sub-streams of the data seed
_MEANS, _TRAIN, _TEST = 0, 1, 2


@dataclass(frozen=True)
class DataSpec:
    task: str = "gaussian-mixture"
    N: int = 2000
    B: int = 100
    features: int = 20
    classes: int = 10
    data_seed: int = 0
    shuffle_seed: int = 0
    n_test: int = 1000
    noise: float = 1.0
    separation: float = 1.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task '{self.task}' (expected one of {TASKS})")
        iterations_per_epoch(self.N, self.B)
        for name in ("features", "classes", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.task == "gaussian-mixture" and self.classes < 2:
            raise ConfigError("classification needs at least two classes")
        if self.noise < 0 or self.separation <= 0:
            raise ConfigError(f"noise must be >= 0 and separation > 0, got {self.noise} and {self.separation}")

    @property
    def steps_per_epoch(self) -> int:
        return iterations_per_epoch(self.N, self.B)


@dataclass(frozen=True)
class Dataset:
    spec: DataSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def is_classification(self) -> bool:
        return self.spec.task == "gaussian-mixture"


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------- tasks ----------
def _mixture(spec: DataSpec, rng: np.random.Generator, means: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, spec.classes, size=n)
    x = means[labels] + spec.noise * rng.standard_normal((n, spec.features))
    return x, one_hot(labels, spec.classes)


def _teacher(spec: DataSpec, rng: np.random.Generator, weights, n: int) -> Tuple[np.ndarray, np.ndarray]:
    w1, w2 = weights
    x = rng.standard_normal((n, spec.features))
    y = np.maximum(x @ w1, 0.0) @ w2
    return x, y + spec.noise * 0.1 * rng.standard_normal(y.shape)


def make_dataset(spec: DataSpec) -> Dataset:
    """Train and test sets; the test set comes from its own stream and does not depend on N."""
    seeds = [np.random.default_rng([spec.data_seed, k]) for k in (_MEANS, _TRAIN, _TEST)]
    if spec.task == "gaussian-mixture":
        means = spec.separation * seeds[_MEANS].standard_normal((spec.classes, spec.features))
        x_tr, y_tr = _mixture(spec, seeds[_TRAIN], means, spec.N)
        x_te, y_te = _mixture(spec, seeds[_TEST], means, spec.n_test)
    else:
        hidden = max(spec.features, spec.classes)
        rng = seeds[_MEANS]
        weights = (rng.standard_normal((spec.features, hidden)) / np.sqrt(spec.features),
                   rng.standard_normal((hidden, spec.classes)) / np.sqrt(hidden))
        x_tr, y_tr = _teacher(spec, seeds[_TRAIN], weights, spec.N)
        x_te, y_te = _teacher(spec, seeds[_TEST], weights, spec.n_test)
    return Dataset(spec, x_tr, y_tr, x_te, y_te)


# ---------- batching ----------
def epoch_order(spec: DataSpec, epoch: int) -> np.ndarray:
    return np.random.default_rng([spec.shuffle_seed, epoch]).permutation(spec.N)


def iterate_batches(data: Dataset, epochs: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    B = data.spec.B
    for epoch in range(epochs):
        order = epoch_order(data.spec, epoch)
        for start in range(0, data.spec.N, B):
            idx = order[start:start + B]
            yield data.x_train[idx], data.y_train[idx]
