"""Randomized self-checks for gradients and aggregators, run by `check --trials n`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..aggregation import (
    AggregationPolicy,
    ClientUpdate,
    DpConfig,
    clip_update,
    coordinate_median,
    dp_aggregate,
    fedavg,
    geometric_median,
)
from ..model import Batch, CrossEntropyLoss, ModelParams, ModelSpec, finite_diff_check
from ..personalization import EWCLoss, FisherDiag, KDLoss
from ..seeding import derive_rng

GRAD_TOL = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    trials: int
    failures: int
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.failures == 0


def _random_spec(rng: np.random.Generator) -> ModelSpec:
    return ModelSpec(int(rng.integers(1, 6)), int(rng.integers(0, 5)), int(rng.integers(2, 5)))


def _random_model(spec: ModelSpec, rng: np.random.Generator, scale: float = 1.0) -> ModelParams:
    return ModelParams(spec, scale * rng.normal(size=spec.parameter_count))


def _random_batch(spec: ModelSpec, rng: np.random.Generator) -> Batch:
    n = int(rng.integers(1, 8))
    return Batch(rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.num_classes, size=n))


def _random_updates(rng: np.random.Generator, spec: ModelSpec, scale: float = 1.0) -> list[ClientUpdate]:
    m = int(rng.integers(1, 8))
    return [ClientUpdate(i, _random_model(spec, rng, scale)) for i in range(m)]


def _grad_case(kind: str) -> Callable[[np.random.Generator], float]:
    def case(rng):
        spec = _random_spec(rng)
        model = _random_model(spec, rng)
        batch = _random_batch(spec, rng)
        if kind == "ce":
            loss = CrossEntropyLoss()
        elif kind == "ewc":
            anchor = _random_model(spec, rng)
            loss = EWCLoss(anchor, FisherDiag(rng.random(spec.parameter_count)), float(rng.uniform(0, 5)))
        else:
            teacher = _random_model(spec, rng)
            loss = KDLoss(teacher, float(rng.uniform(0, 1)), float(rng.choice([1, 2, 5])))
        return finite_diff_check(loss, model, batch)

    return case


def _gradient_check(name: str, kind: str, trials: int, seed: int) -> CheckResult:
    rng = derive_rng(seed, "check", name)
    errors = [_grad_case(kind)(rng) for _ in range(trials)]
    worst = max(errors)
    return CheckResult(name, trials, sum(e >= GRAD_TOL for e in errors), f"max relative error {worst:.2e}")


def _property(name: str, trials: int, seed: int, prop: Callable[[np.random.Generator], bool]) -> CheckResult:
    rng = derive_rng(seed, "check", name)
    failures = sum(not prop(rng) for _ in range(trials))
    return CheckResult(name, trials, failures)


def _fedavg_fixed_point(rng) -> bool:
    spec = _random_spec(rng)
    g = _random_model(spec, rng)
    updates = [ClientUpdate(i, g) for i in range(int(rng.integers(1, 8)))]
    return np.allclose(fedavg(g, updates, float(rng.uniform(0.1, 2))).values, g.values, rtol=0, atol=1e-12)


def _fedavg_linearity(rng) -> bool:
    spec = _random_spec(rng)
    g = _random_model(spec, rng)
    ups = _random_updates(rng, spec)
    shift, a = rng.normal(size=spec.parameter_count), float(rng.uniform(-3, 3))
    eta = float(rng.uniform(0.1, 2))
    # shifting every model and the global by one vector shifts the result by it
    shifted = [ClientUpdate(u.client_id, u.params.with_values(u.params.values + shift)) for u in ups]
    lhs = fedavg(g.with_values(g.values + shift), shifted, eta).values
    ok_shift = np.allclose(lhs, fedavg(g, ups, eta).values + shift, atol=1e-9)
    # scaling every model and the global scales the result
    scaled = [ClientUpdate(u.client_id, u.params.with_values(a * u.params.values)) for u in ups]
    ok_scale = np.allclose(fedavg(g.with_values(a * g.values), scaled, eta).values, a * fedavg(g, ups, eta).values, atol=1e-9)
    return bool(ok_shift and ok_scale)


def _clip_norm(rng) -> bool:
    delta = rng.normal(size=int(rng.integers(1, 30))) * float(rng.uniform(0.01, 10))
    s = float(rng.uniform(0.01, 5))
    out = clip_update(delta, s)
    norm = np.linalg.norm(delta)
    if norm <= s:
        return bool(np.array_equal(out, delta))
    return bool(np.isclose(np.linalg.norm(out), s, rtol=1e-12) and np.allclose(out * norm / s, delta))


def _median_range(rng) -> bool:
    spec = _random_spec(rng)
    ups = _random_updates(rng, spec, scale=float(rng.uniform(0.1, 10)))
    stack = np.stack([u.params.values for u in ups])
    med = coordinate_median(ups).values
    return bool(np.all(stack.min(axis=0) <= med) and np.all(med <= stack.max(axis=0)))


def _dp_noiseless(rng) -> bool:
    spec = _random_spec(rng)
    g = _random_model(spec, rng)
    ups = _random_updates(rng, spec)
    eta = float(rng.uniform(0.1, 2))
    policy = AggregationPolicy("dp", eta, dp=DpConfig(np.inf, 0.0))
    out = dp_aggregate(g, ups, policy, np.random.default_rng(0))
    return bool(np.array_equal(out.values, fedavg(g, ups, eta).values))


def _geometric_median_anchor(rng) -> bool:
    spec = _random_spec(rng)
    ups = _random_updates(rng, spec)
    pts = np.stack([u.params.values for u in ups])
    x = geometric_median(ups).params.values
    cost = lambda p: np.linalg.norm(pts - p, axis=1).sum()  # noqa: E731
    return bool(cost(x) <= min(cost(p) for p in pts) + 1e-9)


def run_checks(trials: int, seed: int = 0, aggregator_trials: int | None = None) -> list[CheckResult]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    agg = aggregator_trials or trials
    return [
        _gradient_check("grad-cross-entropy", "ce", trials, seed),
        _gradient_check("grad-ewc", "ewc", trials, seed),
        _gradient_check("grad-kd", "kd", trials, seed),
        _property("fedavg-fixed-point", agg, seed, _fedavg_fixed_point),
        _property("fedavg-linearity", agg, seed, _fedavg_linearity),
        _property("clip-norm", agg, seed, _clip_norm),
        _property("median-range", agg, seed, _median_range),
        _property("dp-noiseless-degeneracy", agg, seed, _dp_noiseless),
        _property("geometric-median-anchor", agg, seed, _geometric_median_anchor),
    ]
