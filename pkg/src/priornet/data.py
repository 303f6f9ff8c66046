"""Synthetic Gaussian-class data, OOD samplers and CSV dataset I/O."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dirichlet import categorical_entropy

__all__ = [
    "LabeledDataset",
    "UnlabeledDataset",
    "GaussianMixtureSpec",
    "DatasetFormatError",
    "generate_gaussian_classes",
    "true_posterior",
    "true_posterior_entropy",
    "sample_ood_annulus",
    "grid_points",
    "save_dataset",
    "load_dataset",
]


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``line`` and ``column`` are 1-based."""

    def __init__(self, path, line, column, message):
        self.path, self.line, self.column = path, line, column
        super().__init__(f"{path}:{line}:{column}: {message}")


@dataclass(frozen=True)
class UnlabeledDataset:
    features: np.ndarray

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("features must be a non-empty (N, D) matrix")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class LabeledDataset(UnlabeledDataset):
    labels: np.ndarray = None
    num_classes: int = None

    def __post_init__(self):
        super().__post_init__()
        y = np.array(self.labels)
        if y.shape != (self.features.shape[0],):
            raise ValueError("need exactly one label per row")
        if y.size and not np.all(y == np.round(y)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        k = int(y.max()) + 1 if self.num_classes is None else int(self.num_classes)
        if k < 2 or y.min() < 0 or y.max() >= k:
            raise ValueError(f"labels must lie in [0, {k})")
        y.setflags(write=False)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", k)


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Classes with means equally spaced on a circle and shared isotropic ``sigma``.

    Means sit at angles ``90 + 360 c / K`` degrees, i.e. 90, 210, 330 for K = 3.
    """

    sigma: float = 1.0
    radius: float = 4.0
    n_per_class: int = 1000
    num_classes: int = 3

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.radius > 0 or self.n_per_class < 1 or self.num_classes < 2:
            raise ValueError("need radius > 0, n_per_class >= 1, num_classes >= 2")

    @property
    def means(self):
        angles = np.deg2rad(90.0 + 360.0 * np.arange(self.num_classes) / self.num_classes)
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    @property
    def ood_inner_radius(self):
        """Inner edge of the OOD training annulus, three sigma past the means."""
        return self.radius + 3.0 * self.sigma

    @property
    def ood_outer_radius(self):
        return self.ood_inner_radius + 4.0 * self.sigma


def generate_gaussian_classes(spec, seed):
    rng = np.random.default_rng(seed)
    k, n = spec.num_classes, spec.n_per_class
    labels = np.repeat(np.arange(k), n)
    features = spec.means[labels] + spec.sigma * rng.standard_normal((k * n, 2))
    return LabeledDataset(features, labels, k)


def true_posterior(spec, x):
    """Bayes posterior over classes at ``x`` (equal priors), shape ``(..., K)``."""
    x = np.asarray(x, dtype=np.float64)
    d2 = ((x[..., None, :] - spec.means) ** 2).sum(axis=-1)
    logits = -d2 / (2.0 * spec.sigma**2)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def true_posterior_entropy(spec, x):
    return categorical_entropy(true_posterior(spec, x))


def sample_ood_annulus(inner_radius, outer_radius, n, seed):
    """``n`` points uniform (by area) on the annulus ``inner <= |x| <= outer``."""
    if not 0 < inner_radius < outer_radius:
        raise ValueError("need 0 < inner_radius < outer_radius")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    u = rng.random(n)
    r = np.sqrt(inner_radius**2 + u * (outer_radius**2 - inner_radius**2))
    return UnlabeledDataset(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))


def grid_points(x_range, y_range, resolution):
    """Row-major lattice: y is the slow axis, x the fast one."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    xs = np.linspace(x_range[0], x_range[1], resolution)
    ys = np.linspace(y_range[0], y_range[1], resolution)
    gx, gy = np.meshgrid(xs, ys)
    return UnlabeledDataset(np.stack([gx.ravel(), gy.ravel()], axis=1))


def save_dataset(dataset, path):
    """Write ``x0,x1,...[,label]`` CSV with round-trip float precision."""
    labeled = isinstance(dataset, LabeledDataset)
    header = [f"x{j}" for j in range(dataset.dim)] + (["label"] if labeled else [])
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(dataset.features):
            cells = [repr(float(v)) for v in row]
            if labeled:
                cells.append(str(int(dataset.labels[i])))
            w.writerow(cells)


def load_dataset(path, num_classes=None):
    """Read a CSV written by :func:`save_dataset`.

    A trailing ``label`` header column yields a :class:`LabeledDataset`.
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DatasetFormatError(path, 1, 1, "empty file")
    header = rows[0]
    labeled = header[-1] == "label"
    n_feat = len(header) - labeled
    for j, name in enumerate(header[:n_feat]):
        if name != f"x{j}":
            raise DatasetFormatError(path, 1, j + 1, f"expected header x{j}, got {name!r}")
    if n_feat < 1:
        raise DatasetFormatError(path, 1, 1, "no feature columns")
    if len(rows) < 2:
        raise DatasetFormatError(path, 2, 1, "no data rows")

    features = np.empty((len(rows) - 1, n_feat))
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != len(header):
            raise DatasetFormatError(
                path, line, min(len(row), len(header)) + 1,
                f"expected {len(header)} fields, got {len(row)}",
            )
        for j in range(n_feat):
            try:
                features[i, j] = float(row[j])
            except ValueError:
                raise DatasetFormatError(path, line, j + 1, f"not a number: {row[j]!r}") from None
            if not math.isfinite(features[i, j]):
                raise DatasetFormatError(path, line, j + 1, "non-finite value")
        if labeled:
            try:
                labels[i] = int(row[-1])
            except ValueError:
                raise DatasetFormatError(path, line, n_feat + 1, f"bad label: {row[-1]!r}") from None
    if labeled:
        try:
            return LabeledDataset(features, labels, num_classes)
        except ValueError as exc:
            raise DatasetFormatError(path, 2, n_feat + 1, str(exc)) from None
    return UnlabeledDataset(features)
