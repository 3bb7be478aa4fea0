"""Synthetic images with a class hierarchy.

Every superclass owns a smooth random base pattern and every class a smooth
random pattern of its own. A sample is

    (1 + 0.5 noise a) * base[super] + class_weight * (1 + 0.5 noise b) * pattern[class]
        + noise * eps

with ``a, b`` standard normal per sample and ``eps`` white pixel noise, so
classes sharing a superclass are closer to each other than to the rest, and
``noise = 0`` makes all samples of a class identical.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import InvalidSpec
from ..nets import load_checkpoint, save_checkpoint
from ..numerics import prng


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 12
    n_super: int = 3
    height: int = 16
    width: int = 16
    train_per_class: int = 200
    test_per_class: int = 100
    noise: float = 1.0
    class_weight: float = 0.5
    smoothness: float = 2.0
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        if self.n_super < 1 or self.n_classes % self.n_super:
            raise InvalidSpec(f"{self.n_super} superclasses do not divide {self.n_classes} classes")
        if self.noise < 0:
            raise InvalidSpec("noise must be nonnegative")
        if min(self.height, self.width, self.train_per_class, self.test_per_class) < 1:
            raise InvalidSpec("sizes and sample counts must be positive")
        if self.smoothness <= 0:
            raise InvalidSpec("smoothness must be positive")
        return self

    def superclass_of(self) -> np.ndarray:
        return np.arange(self.n_classes) // (self.n_classes // self.n_super)


@dataclass
class Dataset:
    spec: DatasetSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def _smooth_field(rng, h, w, sigma):
    """Unit-variance random field low-pass filtered with a Gaussian of width ``sigma`` px."""
    noise = rng.normal(size=(h, w))
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    filt = np.exp(-2.0 * (np.pi * sigma) ** 2 * (kx**2 + ky**2))
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * filt))
    field -= field.mean()
    return field / field.std()


def gen_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = prng(spec.seed)
    h, w = spec.height, spec.width
    bases = np.stack([_smooth_field(rng, h, w, spec.smoothness) for _ in range(spec.n_super)])
    patterns = np.stack([_smooth_field(rng, h, w, spec.smoothness) for _ in range(spec.n_classes)])
    sup = spec.superclass_of()

    def draw(per_class):
        n = per_class * spec.n_classes
        y = np.repeat(np.arange(spec.n_classes), per_class)
        a = rng.normal(size=n)[:, None, None]
        b = rng.normal(size=n)[:, None, None]
        eps = rng.normal(size=(n, h, w))
        x = ((1.0 + 0.5 * spec.noise * a) * bases[sup[y]]
             + spec.class_weight * (1.0 + 0.5 * spec.noise * b) * patterns[y]
             + spec.noise * eps)
        order = rng.permutation(n)
        return x[order, None], y[order]

    x_train, y_train = draw(spec.train_per_class)
    x_test, y_test = draw(spec.test_per_class)
    return Dataset(spec, x_train, y_train, x_test, y_test)


def save_dataset(path, data: Dataset):
    return save_checkpoint(path, {
        "x_train": data.x_train, "y_train": data.y_train.astype(float),
        "x_test": data.x_test, "y_test": data.y_test.astype(float),
    })


def load_dataset(path, spec: DatasetSpec) -> Dataset:
    arrays = load_checkpoint(path)
    return Dataset(spec, arrays["x_train"], arrays["y_train"].astype(int),
                   arrays["x_test"], arrays["y_test"].astype(int))


def summary(data: Dataset) -> dict:
    """Per-split counts and the within/cross superclass mean image distances."""
    spec = data.spec
    sup = spec.superclass_of()
    means = np.stack([data.x_train[data.y_train == c].reshape(-1, spec.height * spec.width).mean(0)
                      for c in range(spec.n_classes)])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    same = sup[:, None] == sup[None, :]
    off = ~np.eye(spec.n_classes, dtype=bool)
    return {
        "spec": asdict(spec),
        "n_train": int(data.y_train.size),
        "n_test": int(data.y_test.size),
        "train_counts": np.bincount(data.y_train, minlength=spec.n_classes).tolist(),
        "test_counts": np.bincount(data.y_test, minlength=spec.n_classes).tolist(),
        "within_super_class_mean_distance": float(d[same & off].mean()) if np.any(same & off) else 0.0,
        "cross_super_class_mean_distance": float(d[~same].mean()) if np.any(~same) else 0.0,
    }
