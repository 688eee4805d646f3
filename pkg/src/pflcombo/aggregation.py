"""Server-side aggregation rules over aligned flat parameter vectors.

All reductions run in ascending client_id order so results are bitwise
reproducible regardless of how the client updates were produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import ModelParams, check_layouts

AGGREGATION_KINDS = ("fedavg", "dp", "median", "geometric_median")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ModelParams


@dataclass(frozen=True)
class DpConfig:
    """Clip bound and Gaussian noise scale for private aggregation.

    `declared_epsilon` / `declared_delta` are carried as metadata only; no
    privacy accounting is performed.
    """

    clip_bound: float
    noise_sd: float
    declared_epsilon: Optional[float] = None
    declared_delta: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.clip_bound > 0:
            raise ValueError(f"clip_bound must be positive, got {self.clip_bound}")
        if not self.noise_sd >= 0:
            raise ValueError(f"noise_sd must be non-negative, got {self.noise_sd}")
        for name in ("declared_epsilon", "declared_delta"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class AggregationPolicy:
    kind: str = "fedavg"
    eta: float = 1.0
    dp: Optional[DpConfig] = None
    weiszfeld_tol: float = 1e-8
    weiszfeld_max_iter: int = 1000

    def __post_init__(self) -> None:
        if self.kind not in AGGREGATION_KINDS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}; expected one of {AGGREGATION_KINDS}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if (self.dp is not None) != (self.kind == "dp"):
            raise ValueError("a DpConfig is required for kind='dp' and only for it")
        if not self.weiszfeld_tol > 0 or self.weiszfeld_max_iter < 1:
            raise ValueError("weiszfeld_tol must be positive and weiszfeld_max_iter >= 1")


def _ordered(global_prev: Optional[ModelParams], updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    models = [u.params for u in ordered]
    check_layouts(*(([global_prev] if global_prev is not None else []) + models))
    return ordered


def _mean_delta(global_prev: ModelParams, updates: list[ClientUpdate], clip_bound: float = math.inf) -> np.ndarray:
    total = np.zeros_like(global_prev.values)
    for u in updates:
        total = total + clip_update(u.params.values - global_prev.values, clip_bound)
    return total


def fedavg(global_prev: ModelParams, updates: Sequence[ClientUpdate], eta: float = 1.0) -> ModelParams:
    """G + (eta/m) * sum_i (P_i - G)."""
    ordered = _ordered(global_prev, updates)
    total = _mean_delta(global_prev, ordered)
    return global_prev.with_values(global_prev.values + (eta / len(ordered)) * total)


def clip_update(delta: np.ndarray, clip_bound: float) -> np.ndarray:
    """Scale `delta` onto the L2 ball of radius `clip_bound` if it lies outside."""
    norm = float(np.linalg.norm(delta))
    if norm <= clip_bound:
        return delta
    return delta * (clip_bound / norm)


def dp_aggregate(
    global_prev: ModelParams,
    updates: Sequence[ClientUpdate],
    policy: AggregationPolicy,
    noise_rng: np.random.Generator,
) -> ModelParams:
    """Clipped FedAvg plus one draw of i.i.d. N(0, sd^2) noise on the aggregate."""
    if policy.kind != "dp" or policy.dp is None:
        raise ValueError("dp_aggregate requires a policy with kind='dp'")
    ordered = _ordered(global_prev, updates)
    total = _mean_delta(global_prev, ordered, policy.dp.clip_bound)
    values = global_prev.values + (policy.eta / len(ordered)) * total
    if policy.dp.noise_sd > 0:
        values = values + noise_rng.normal(0.0, policy.dp.noise_sd, size=values.shape)
    return global_prev.with_values(values)


def coordinate_median(updates: Sequence[ClientUpdate]) -> ModelParams:
    ordered = _ordered(None, updates)
    stacked = np.stack([u.params.values for u in ordered])
    # np.median averages the two middle order statistics for even counts
    return ordered[0].params.with_values(np.median(stacked, axis=0))


def ra_aggregate(global_prev: ModelParams, updates: Sequence[ClientUpdate], eta: float = 1.0) -> ModelParams:
    _ordered(global_prev, updates)
    med = coordinate_median(updates)
    return global_prev.with_values(global_prev.values + eta * (med.values - global_prev.values))


@dataclass(frozen=True)
class GeometricMedianResult:
    params: ModelParams
    converged: bool
    iterations: int


def _sum_dist(points: np.ndarray, x: np.ndarray) -> float:
    return float(np.linalg.norm(points - x, axis=1).sum())


def geometric_median(
    updates: Sequence[ClientUpdate], tol: float = 1e-8, max_iter: int = 1000
) -> GeometricMedianResult:
    """Weiszfeld iteration started from the coordinate-wise mean.

    If an iterate lands on an input point, that point is returned. Two
    inputs yield their midpoint (the starting point is already optimal and
    the equal-weight Weiszfeld step keeps it there).
    """
    ordered = _ordered(None, updates)
    template = ordered[0].params
    points = np.stack([u.params.values for u in ordered])
    scale = max(1.0, float(np.abs(points).max()))
    x = points.mean(axis=0)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        dist = np.linalg.norm(points - x, axis=1)
        hit = dist <= 1e-12 * scale
        if hit.any():
            x = points[int(np.argmax(hit))].copy()
            converged = True
            break
        w = 1.0 / dist
        new_x = (w[:, None] * points).sum(axis=0) / w.sum()
        step = float(np.linalg.norm(new_x - x))
        x = new_x
        if step < tol:
            converged = True
            break
    # never return something worse than the best input point
    best_obj = _sum_dist(points, x)
    anchor_obj = [_sum_dist(points, p) for p in points]
    j = int(np.argmin(anchor_obj))
    if anchor_obj[j] < best_obj - 1e-12 * max(1.0, best_obj):
        x = points[j].copy()
    return GeometricMedianResult(template.with_values(x), converged, it)


def aggregate(
    policy: AggregationPolicy,
    global_prev: ModelParams,
    updates: Sequence[ClientUpdate],
    noise_rng: Optional[np.random.Generator] = None,
) -> ModelParams:
    """Dispatch on `policy.kind`."""
    if policy.kind == "fedavg":
        return fedavg(global_prev, updates, policy.eta)
    if policy.kind == "dp":
        if noise_rng is None:
            raise ValueError("dp aggregation needs a noise generator")
        return dp_aggregate(global_prev, updates, policy, noise_rng)
    if policy.kind == "median":
        return ra_aggregate(global_prev, updates, policy.eta)
    _ordered(global_prev, updates)
    gm = geometric_median(updates, policy.weiszfeld_tol, policy.weiszfeld_max_iter).params
    return global_prev.with_values(global_prev.values + policy.eta * (gm.values - global_prev.values))
