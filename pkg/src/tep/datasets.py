"""Seedable toy datasets for the two experiments.

Randomness comes from ``numpy.random.Generator(PCG64(seed))``.  PCG64 is a
fixed, documented 128-bit-state generator whose stream does not depend on the
platform, so a seed pins the data bit for bit (for a given numpy release).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIXTURE_WEIGHTS = (0.05, 0.25, 0.45, 0.25)
MIXTURE_CENTERS = ((1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0))
MIXTURE_LABELS = (1, -1, -1, 1)
MIXTURE_VAR = 0.05


@dataclass(eq=False)
class LabeledSet:
    X: np.ndarray
    y: np.ndarray
    outlier_mask: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=int)
        self.outlier_mask = np.asarray(self.outlier_mask, dtype=bool)
        n = self.X.shape[0]
        if self.y.shape != (n,) or self.outlier_mask.shape != (n,):
            raise ValueError("X, y and outlier_mask lengths disagree")
        if not np.all(np.isin(self.y, (-1, 1))):
            raise ValueError("labels must be +1 or -1")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def clean(self) -> "LabeledSet":
        keep = ~self.outlier_mask
        return LabeledSet(self.X[keep], self.y[keep], self.outlier_mask[keep])

    def to_csv(self, path) -> None:
        d = self.X.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(d)] + ["y", "is_outlier"])
            for xi, yi, oi in zip(self.X, self.y, self.outlier_mask):
                w.writerow([repr(float(a)) for a in xi] + [int(yi), int(oi)])

    @classmethod
    def from_csv(cls, path) -> "LabeledSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(1 for h in header if h.startswith("x"))
        arr = np.array(body, dtype=float).reshape(len(body), len(header))
        return cls(arr[:, :d], arr[:, d].astype(int), arr[:, d + 1].astype(bool))


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gen_bpm_mixture(n: int = 1000, seed: int = 0) -> LabeledSet:
    """Four-component Gaussian mixture; components at x1 = +1 are labelled +1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    comp = rng.choice(len(MIXTURE_WEIGHTS), size=n, p=MIXTURE_WEIGHTS)
    centers = np.asarray(MIXTURE_CENTERS)[comp]
    X = centers + np.sqrt(MIXTURE_VAR) * rng.standard_normal((n, 2))
    y = np.asarray(MIXTURE_LABELS)[comp]
    return LabeledSet(X, y, np.zeros(n, dtype=bool))


def gen_stp_clusters(
    n: int = 200,
    n_outliers: int = 3,
    seed: int = 0,
    *,
    outlier_label: int = 1,
    outlier_distance: float = 1.0,
    outlier_noise: float = 0.1,
) -> LabeledSet:
    """Two unit-variance clusters at ``[y, y]`` plus mislabelled outliers.

    Outliers carry ``outlier_label`` and sit near ``-outlier_label *
    outlier_distance * [1, 1]``, i.e. at the opposite class centre by default,
    with isotropic jitter of standard deviation ``outlier_noise``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = _rng(seed)
    y = rng.choice(np.array([-1, 1]), size=n)
    X = y[:, None] * np.ones(2) + rng.standard_normal((n, 2))
    yo = np.full(n_outliers, int(outlier_label))
    Xo = -yo[:, None] * outlier_distance * np.ones(2) + outlier_noise * rng.standard_normal((n_outliers, 2))
    mask = np.r_[np.zeros(n, dtype=bool), np.ones(n_outliers, dtype=bool)]
    return LabeledSet(np.vstack([X, Xo]), np.r_[y, yo], mask)


def save(ds: LabeledSet, path) -> Path:
    path = Path(path)
    ds.to_csv(path)
    return path
