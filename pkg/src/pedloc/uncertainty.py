"""Aleatoric + epistemic uncertainty from MC dropout and Laplace sampling.

For each of T stochastic forward passes the network gives (mu_t, s_t).
The loss is relative, so exp(s_t) is a spread relative to distance;
the spread in meters is ``b_t = mu_t * exp(s_t)``.  From each pass I
samples are drawn from Laplace(mu_t, b_t), and the combined variance is
the population variance of all T*I samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Point3D, localize
from .height_model import HeightMixture, relative_task_error
from .net import LocModel, forward, require_trained


@dataclass(frozen=True)
class UncertaintyConfig:
    T: int = 50
    I: int = 100
    seed: int = 0
    chunk: int = 256  # instances per vectorized batch

    def __post_init__(self):
        if self.T < 1 or self.I < 1:
            raise ValueError(f"T and I must be >= 1, got T={self.T}, I={self.I}")


@dataclass(frozen=True)
class DistanceEstimate:
    mu: float
    b: float
    sigma: float
    point: Point3D | None = None

    @property
    def interval(self) -> tuple[float, float]:
        return (self.mu - self.sigma, self.mu + self.sigma)

    @property
    def aleatoric_interval(self) -> tuple[float, float]:
        return (self.mu - self.b, self.mu + self.b)


def spread_in_meters(mu, s):
    return np.abs(mu) * np.exp(s)


def sample_laplace(rng: np.random.Generator, mu, b, size):
    """Inverse-CDF Laplace draws; ``size`` must broadcast against mu and b."""
    # uniform on the open interval (0, 1) so the log never sees 0
    r = (rng.integers(0, 2**53, size=size, dtype=np.int64) + 0.5) / 2.0**53
    u = r - 0.5
    return mu - b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def combined_variance(mus, bs, I: int, rng: np.random.Generator) -> np.ndarray:
    """Variance of T*I Laplace samples around pass outputs ``mus``/``bs`` of shape (..., T)."""
    mus = np.asarray(mus, dtype=float)[..., None]
    bs = np.asarray(bs, dtype=float)[..., None]
    shape = np.broadcast_shapes(mus.shape, bs.shape)[:-1] + (I,)
    x = sample_laplace(rng, mus, bs, shape)
    x = x.reshape(x.shape[:-2] + (-1,))
    return x.var(axis=-1)


def mc_passes(model: LocModel, inputs, cfg: UncertaintyConfig):
    """Pass-wise (mu, b) of shape (N, T); pass t uses dropout stream (seed, 0, t)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    mus = np.empty((x.shape[0], cfg.T))
    bs = np.empty_like(mus)
    for t in range(cfg.T):
        rng = np.random.default_rng([cfg.seed, 0, t])
        for i in range(0, x.shape[0], 4096):
            head = forward(model, x[i : i + 4096], "mc", rng=rng)
            mus[i : i + 4096, t] = head.mu
            bs[i : i + 4096, t] = spread_in_meters(head.mu, head.s)
    return mus, bs


def estimates_from_passes(mus, bs, rays, I: int, rng: np.random.Generator, chunk: int = 256):
    mus = np.atleast_2d(mus)
    bs = np.atleast_2d(bs)
    out = []
    for i in range(0, mus.shape[0], chunk):
        var = combined_variance(mus[i : i + chunk], bs[i : i + chunk], I, rng)
        for k in range(var.shape[0]):
            j = i + k
            mu = float(mus[j].mean())
            point = localize(mu, rays[j]) if rays is not None and mu > 0 else None
            out.append(DistanceEstimate(mu=mu, b=float(bs[j].mean()), sigma=math.sqrt(var[k]), point=point))
    return out


def mc_predict(model: LocModel, inputs, center_rays=None, cfg: UncertaintyConfig = UncertaintyConfig()):
    """Distance, spread and combined sigma for each input row."""
    require_trained(model)
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    rays = None if center_rays is None else np.atleast_2d(np.asarray(center_rays, dtype=float))
    mus, bs = mc_passes(model, x, cfg)
    lap_rng = np.random.default_rng([cfg.seed, 1])
    return estimates_from_passes(mus, bs, rays, cfg.I, lap_rng, cfg.chunk)


# ------------------------------------------------------------------ reports


def _columns(estimates):
    """(mu, b, sigma) arrays from DistanceEstimate objects or prediction dicts."""
    if not len(estimates):
        raise ValueError("no estimates given")
    first = estimates[0]
    if isinstance(first, dict):
        get = lambda e, k: e[k]  # noqa: E731
    else:
        get = getattr
    return tuple(np.array([float(get(e, k)) for e in estimates]) for k in ("mu", "b", "sigma"))


def coverage_report(estimates, ground_truths, interval_kind: str = "combined", mix: HeightMixture | None = None) -> dict:
    """Recall of +-sigma (or +-b) intervals and the precision columns.

    ``abs_err_over_sigma`` is mean |x - mu| / sigma; ``abs_sigma_minus_task_error``
    (only with ``mix``) is mean |sigma - e_hat(x)|.
    """
    if interval_kind not in ("combined", "aleatoric"):
        raise ValueError(f"interval_kind must be 'combined' or 'aleatoric', got {interval_kind!r}")
    gt = np.asarray(ground_truths, dtype=float)
    if gt.size == 0:
        raise ValueError("empty input")
    mu, b, sigma = _columns(estimates)
    if gt.shape != mu.shape:
        raise ValueError("estimates and ground truths must be matched pairs")
    half = sigma if interval_kind == "combined" else b
    err = np.abs(gt - mu)
    report = {
        "interval_kind": interval_kind,
        "n": int(gt.size),
        "recall": 100.0 * float(np.mean(err <= half)),
        "mean_interval": float(np.mean(half)),
        "abs_err_over_sigma": float(np.mean(err / half)) if np.all(half > 0) else float("inf"),
    }
    if mix is not None:
        report["abs_sigma_minus_task_error"] = float(np.mean(np.abs(half - gt * relative_task_error(mix))))
    return report


def high_risk_analysis(estimates, ground_truths) -> dict:
    """Share of instances closer than predicted, and how many of those the interval covers."""
    gt = np.asarray(ground_truths, dtype=float)
    if gt.size == 0:
        raise ValueError("empty input")
    mu, _, sigma = _columns(estimates)
    risky = gt < mu
    covered = np.abs(gt - mu) <= sigma
    n_risky = int(risky.sum())
    return {
        "n": int(gt.size),
        "n_high_risk": n_risky,
        "high_risk_fraction": 100.0 * n_risky / gt.size,
        "covered_high_risk": 100.0 * float(covered[risky].mean()) if n_risky else float("nan"),
    }


def spread_vs_task_error(estimates, ground_truths, mix: HeightMixture, bins=None) -> list[dict]:
    """Per distance bin: mean predicted spread b, task error e_hat and b - e_hat."""
    gt = np.asarray(ground_truths, dtype=float)
    if gt.size == 0:
        raise ValueError("empty input")
    _, b, _ = _columns(estimates)
    if bins is None:
        bins = np.arange(0.0, max(5.0, math.ceil(gt.max() / 5.0) * 5.0) + 5.0, 5.0)
    bins = np.asarray(bins, dtype=float)
    c = relative_task_error(mix)
    rows = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = (gt >= lo) & (gt < hi)
        n = int(sel.sum())
        if n == 0:
            rows.append({"lo": lo, "hi": hi, "n": 0, "mean_b": float("nan"), "e_hat": float("nan"),
                         "b_minus_e_hat": float("nan"), "empty": True})
            continue
        mean_b = float(b[sel].mean())
        e_hat = float(c * gt[sel].mean())
        rows.append({"lo": lo, "hi": hi, "n": n, "mean_b": mean_b, "e_hat": e_hat,
                     "b_minus_e_hat": mean_b - e_hat, "empty": False})
    return rows
