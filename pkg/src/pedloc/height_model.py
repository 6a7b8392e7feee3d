"""Human stature as a Gaussian mixture and the localization error it implies.

If every pedestrian is assumed to be ``h_mean`` tall, a person of true
height ``h`` at distance ``d`` is placed at ``d * h_mean / h`` and the
error is ``d * |1 - h_mean / h|``.  Averaging over the stature
distribution gives an expected error that is exactly linear in ``d``.

Heights are in centimeters, distances in meters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidHeightError

TRUNCATION_SIGMAS = 8.0
GL_NODES = 512

# relative stature spread added when 14-17 year olds are included
TEEN_RELATIVE_SPREAD = {"male": 0.079, "female": 0.056}


@dataclass(frozen=True)
class HeightComponent:
    weight: float
    mean: float
    std: float
    label: str = ""


@dataclass(frozen=True)
class HeightMixture:
    components: tuple[HeightComponent, ...]
    h_mean: float = field(default=None)  # defaults to the mixture mean

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("mixture needs at least one component")
        w = sum(c.weight for c in comps)
        if abs(w - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w!r}")
        for c in comps:
            if c.weight < 0:
                raise ValueError(f"negative weight in {c}")
            if not c.std > 0:
                raise ValueError(f"component std must be positive: {c}")
            if not c.mean > 0:
                raise InvalidHeightError(f"component mean must be positive: {c}")
        if self.h_mean is None:
            object.__setattr__(self, "h_mean", self.mean)
        if not self.h_mean > 0:
            raise InvalidHeightError(f"h_mean must be positive, got {self.h_mean}")

    @property
    def mean(self) -> float:
        return float(sum(c.weight * c.mean for c in self.components))

    @property
    def variance(self) -> float:
        m = self.mean
        return float(sum(c.weight * (c.std**2 + (c.mean - m) ** 2) for c in self.components))

    def component(self, label: str) -> HeightComponent:
        for c in self.components:
            if c.label == label:
                return c
        raise KeyError(label)

    def sample(self, rng: np.random.Generator, size=None):
        """Draw (component index, height) pairs."""
        weights = np.array([c.weight for c in self.components])
        idx = rng.choice(len(weights), size=size, p=weights)
        means = np.array([c.mean for c in self.components])[idx]
        stds = np.array([c.std for c in self.components])[idx]
        return idx, means + stds * rng.standard_normal(size)

    def to_dict(self) -> dict:
        return {
            "components": [
                {"weight": c.weight, "mean": c.mean, "std": c.std, "label": c.label}
                for c in self.components
            ],
            "h_mean": self.h_mean,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HeightMixture":
        comps = tuple(HeightComponent(**c) for c in data["components"])
        return cls(comps, h_mean=data.get("h_mean"))


def adult_mixture(h_mean: float | None = None) -> HeightMixture:
    """European adults: men 178 +- 7 cm, women 165 +- 7 cm, equal weights."""
    return HeightMixture(
        (
            HeightComponent(0.5, 178.0, 7.0, "male"),
            HeightComponent(0.5, 165.0, 7.0, "female"),
        ),
        h_mean=h_mean,
    )


def teen_extended_mixture(base: HeightMixture) -> HeightMixture:
    comps = []
    for c in base.components:
        if c.label not in TEEN_RELATIVE_SPREAD:
            raise ValueError(f"component {c} is not labelled male/female")
        r = TEEN_RELATIVE_SPREAD[c.label]
        comps.append(HeightComponent(c.weight, c.mean, float(np.hypot(c.std, c.mean * r)), c.label))
    return HeightMixture(tuple(comps), h_mean=base.h_mean)


def task_error_instance(d_gt, h_gt, h_mean):
    d_gt = np.asarray(d_gt, dtype=float)
    h_gt = np.asarray(h_gt, dtype=float)
    if np.any(h_gt <= 0) or h_mean <= 0:
        raise InvalidHeightError("heights must be positive")
    if np.any(d_gt < 0):
        raise ValueError("distance must be non-negative")
    e = d_gt * np.abs(1.0 - h_mean / h_gt)
    return float(e) if e.ndim == 0 else e


@lru_cache(maxsize=4)
def _legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


def _gauss_pdf(h, mean, std):
    z = (h - mean) / std
    return np.exp(-0.5 * z * z) / (std * np.sqrt(2.0 * np.pi))


def _integrate(f, a: float, b: float, n: int) -> float:
    if b <= a:
        return 0.0
    x, w = _legendre(n)
    half = 0.5 * (b - a)
    h = half * x + 0.5 * (a + b)
    return float(half * np.dot(w, f(h)))


def relative_task_error(mix: HeightMixture, n_nodes: int = GL_NODES) -> float:
    """E_h[|1 - h_mean/h|], the slope of the expected task error in d.

    Each component is integrated on mean +- 8 std, split at h_mean where
    the integrand has its kink.  Heights at or below zero are cut off.
    """
    hm = mix.h_mean
    total = 0.0
    for c in mix.components:
        lo = max(c.mean - TRUNCATION_SIGMAS * c.std, 1e-9 * c.mean)
        hi = c.mean + TRUNCATION_SIGMAS * c.std

        def f(h, c=c):
            return np.abs(1.0 - hm / h) * _gauss_pdf(h, c.mean, c.std)

        pieces = [(lo, hi)] if not lo < hm < hi else [(lo, hm), (hm, hi)]
        total += c.weight * sum(_integrate(f, a, b, n_nodes) for a, b in pieces)
    return total


def expected_task_error(mix: HeightMixture, d_gt):
    if np.any(np.asarray(d_gt) < 0):
        raise ValueError("distance must be non-negative")
    e = np.asarray(d_gt, dtype=float) * relative_task_error(mix)
    return float(e) if e.ndim == 0 else e


@dataclass
class TaskErrorCurve:
    distances: np.ndarray
    e_hat: np.ndarray

    def to_rows(self):
        return [(float(d), float(e)) for d, e in zip(self.distances, self.e_hat)]


def task_error_curve(mix: HeightMixture, d_max: float, n_points: int) -> TaskErrorCurve:
    if not d_max > 0:
        raise ValueError("d_max must be positive")
    if n_points < 2:
        raise ValueError("need at least 2 grid points")
    d = np.linspace(0.0, d_max, n_points)
    return TaskErrorCurve(d, d * relative_task_error(mix))
